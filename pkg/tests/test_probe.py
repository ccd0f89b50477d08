import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from svquant.probe import (
    ProbeClassifier,
    ProbeTask,
    binomial_interval,
    chance_level,
    make_tasks,
    probe_report,
    run_probe,
    shuffled,
)


def blobs(n, seed, shift=3.0, dim=6):
    r = np.random.default_rng(seed)
    y = r.integers(0, 2, n)
    x = r.normal(size=(n, dim)) + shift * y[:, None] * np.eye(dim)[0]
    return x.astype(np.float32), y


def test_learns_separable_task():
    x, y = blobs(300, 0)
    xt, yt = blobs(200, 1)
    clf = ProbeClassifier(hidden=16, epochs=30, lr=3e-3).fit(x, y)
    assert clf.score(xt, yt) > 0.9
    assert clf.decision_function(xt).shape == (200, 2)


def test_string_labels_and_determinism():
    x, y = blobs(100, 2)
    labels = np.array(["f", "m"])[y]
    a = ProbeClassifier(hidden=8, epochs=5, seed=3).fit(x, labels).predict(x)
    b = ProbeClassifier(hidden=8, epochs=5, seed=3).fit(x, labels).predict(x)
    assert set(a) <= {"f", "m"} and np.array_equal(a, b)


def test_estimator_api():
    clf = ProbeClassifier(hidden=4)
    assert clone(clf).get_params()["hidden"] == 4
    with pytest.raises(NotFittedError):
        clf.predict(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        clf.fit(np.zeros((4, 3)), np.zeros(4))


def test_chance_and_interval():
    assert chance_level([0, 0, 0, 1]) == 0.75
    lo, hi = binomial_interval(0.5, 100)
    assert lo == pytest.approx(0.402, abs=1e-3) and hi == pytest.approx(0.598, abs=1e-3)


def test_shuffled_keeps_label_counts():
    x, y = blobs(80, 4)
    task = ProbeTask("g", x, y, x, y)
    s = shuffled(task, seed=1)
    assert np.array_equal(np.sort(s.y_train), np.sort(y))
    assert not np.array_equal(s.y_train, y)
    assert s.name == "g/shuffled"


def test_shuffled_probe_near_chance():
    x, y = blobs(400, 5)
    xt, yt = blobs(400, 6)
    task = shuffled(ProbeTask("g", x, y, xt, yt), seed=0)
    acc = run_probe(task, hidden=16, epochs=10)
    lo, hi = binomial_interval(chance_level(task.y_test), len(yt))
    assert lo - 0.05 <= acc <= hi + 0.05


def test_single_class_rejected():
    x, _ = blobs(10, 0)
    with pytest.raises(ValueError, match="single class"):
        ProbeTask("t", x, np.zeros(10), x, np.arange(10) % 2).validate()


def test_make_tasks_and_report():
    class S:
        def __init__(self, seed):
            r = np.random.default_rng(seed)
            self.gender, self.scene, self.style = (r.integers(0, k, 40) for k in (2, 3, 4))

    x, _ = blobs(40, 0)
    tasks = make_tasks(x, S(0), x, S(1))
    assert set(tasks) == {"gender-like", "scene-like", "speaker-style"}
    rows = probe_report(tasks, "m", hidden=4, epochs=1)
    assert [r["task"] for r in rows] == list(tasks)
    assert all(r["scheme"] == "fp32" and r["bitwidth"] == 32 and 0 <= r["accuracy"] <= 1 for r in rows)
