"""Information probing: small classifiers trained on frozen embeddings."""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autograd as ag
from ._random import rng_for
from .autograd import Tensor, no_grad
from .training import Adam, embed

TASK_FACTORS = {"gender-like": "gender", "scene-like": "scene", "speaker-style": "style"}


class ProbeClassifier(ClassifierMixin, BaseEstimator):
    """Two fully-connected layers with a ReLU in between, trained with Adam.

    Inputs are standardized with statistics of the training set.
    """

    def __init__(self, hidden=64, epochs=100, lr=1e-3, batch_size=64, seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _logits(self, x):
        h = ag.relu(ag.add(ag.matmul(x, self.w1_), self.b1_))
        return ag.add(ag.matmul(h, self.w2_), self.b2_)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("probe training needs at least two classes")
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0) + 1e-6
        Xs = (X - self.mean_) / self.scale_
        init = rng_for(self.seed, "probe/init")
        d, h, c = X.shape[1], self.hidden, len(self.classes_)
        self.w1_ = Tensor(init.normal(0, np.sqrt(2.0 / d), (d, h)), requires_grad=True)
        self.b1_ = Tensor(np.zeros(h), requires_grad=True)
        self.w2_ = Tensor(init.normal(0, np.sqrt(1.0 / h), (h, c)), requires_grad=True)
        self.b2_ = Tensor(np.zeros(c), requires_grad=True)
        opt = Adam([("w1", self.w1_), ("b1", self.b1_), ("w2", self.w2_), ("b2", self.b2_)])
        order_rng = rng_for(self.seed, "probe/shuffle")
        for _ in range(self.epochs):
            order = order_rng.permutation(len(Xs))
            for start in range(0, len(Xs), self.batch_size):
                idx = order[start : start + self.batch_size]
                loss = ag.softmax_cross_entropy(self._logits(Tensor(Xs[idx])), y_enc[idx])
                opt.zero_grad()
                loss.backward()
                opt.step(self.lr)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "w1_")
        X = check_array(X, dtype=np.float32)
        with no_grad():
            return self._logits(Tensor((X - self.mean_) / self.scale_)).data

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


@dataclass
class ProbeTask:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def validate(self):
        for split, y in (("train", self.y_train), ("test", self.y_test)):
            if len(np.unique(y)) < 2:
                raise ValueError(f"probe task {self.name!r}: {split} split has a single class")
        return self


def extract_embeddings(model, x):
    """One whole-utterance embedding per row of ``x``."""
    return embed(model, np.asarray(x, dtype=np.float32))


def make_tasks(train_emb, train_split, test_emb, test_split):
    """Probe tasks over the generator factors; train and test speakers are disjoint."""
    return {
        name: ProbeTask(name, train_emb, getattr(train_split, attr), test_emb, getattr(test_split, attr)).validate()
        for name, attr in TASK_FACTORS.items()
    }


def run_probe(task, hidden=64, epochs=100, lr=1e-3, seed=0):
    """Held-out accuracy of a probe classifier trained on ``task``."""
    task.validate()
    clf = ProbeClassifier(hidden, epochs, lr, seed=seed).fit(task.x_train, task.y_train)
    return float(clf.score(task.x_test, task.y_test))


def chance_level(y):
    _, counts = np.unique(y, return_counts=True)
    return float(counts.max() / counts.sum())


def binomial_interval(p, n, z=1.959963984540054):
    """Normal-approximation interval of an accuracy under success rate ``p``."""
    half = z * math.sqrt(p * (1 - p) / n)
    return p - half, p + half


def shuffled(task, seed=0):
    """Null control: the same task with labels permuted in both splits."""
    rng = rng_for(seed, f"probe/shuffle-labels/{task.name}")
    return ProbeTask(
        f"{task.name}/shuffled", task.x_train, rng.permutation(task.y_train), task.x_test, rng.permutation(task.y_test)
    )


def probe_report(tasks, model_id, scheme=None, bits=32, seed=0, **probe_kw):
    rows = []
    for name, task in tasks.items():
        rows.append({
            "task": name,
            "model": model_id,
            "bitwidth": bits,
            "scheme": scheme or "fp32",
            "accuracy": run_probe(task, seed=seed, **probe_kw),
            "chance": chance_level(task.y_test),
        })
    return rows
