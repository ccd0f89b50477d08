"""Two-stage training: full-precision AAM-softmax training, then quantized fine-tuning."""

import copy
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autograd as ag
from ._io import atomic_write
from ._random import rng_for
from .autograd import Tensor, no_grad
from .exceptions import ConfigurationError, NonFiniteError, TrainingDivergedError
from .layers import QuantizableLayer
from .models import AamHead, ModelConfig, aam_logits, build_model
from .quantizer import QuantScheme, _check_bits

ALPHA_FLOOR = 1e-4


@dataclass
class TrainConfig:
    stage: str = "fp32"
    epochs: int = 40
    lr: float = 1e-3
    decay_epochs: tuple = (20, 32)
    decay_ratio: float = 0.1
    weight_decay: float = 2e-5
    batch_size: int = 128
    seed: int = 0
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.stage not in ("fp32", "qat"):
            raise ConfigurationError(f"stage must be 'fp32' or 'qat', got {self.stage!r}")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigurationError("decay epochs must be strictly increasing")
        if self.decay_epochs and self.epochs and self.decay_epochs[-1] >= self.epochs:
            raise ConfigurationError("decay epochs must be smaller than the epoch count")

    @classmethod
    def fp32(cls, **overrides):
        return cls._preset("fp32", 40, overrides)

    @classmethod
    def qat(cls, **overrides):
        return cls._preset("qat", 20, overrides)

    @classmethod
    def _preset(cls, stage, epochs, overrides):
        # decays after half and four fifths of the run unless given explicitly
        epochs = int(overrides.get("epochs", epochs))
        decays = overrides.get("decay_epochs")
        if decays is None:
            decays = sorted({e for e in (epochs // 2, epochs * 4 // 5) if 0 < e < epochs})
        return cls(**{**overrides, "stage": stage, "epochs": epochs, "decay_epochs": decays})

    def lr_at(self, epoch):
        """Learning rate for 0-based ``epoch``: decayed once per passed decay epoch."""
        passed = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.lr * self.decay_ratio**passed

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, grads, state, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8, no_decay=()):
    """One Adam update with decoupled weight decay, in place.

    ``params`` and ``grads`` map names to arrays; names in ``no_decay`` skip
    weight decay. Missing gradients count as zero.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and name not in no_decay:
            update = update + weight_decay * p
        p -= (lr * update).astype(p.dtype)
    return params, state


class Adam:
    """Adam over named tensors; learning rate is passed per step."""

    def __init__(self, named_params, weight_decay=0.0, no_decay=()):
        self.params = dict(named_params)
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr):
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        optimizer_step(arrays, grads, self.state, lr, self.weight_decay, no_decay=self.no_decay)

    def state_dict(self):
        out = {"step": np.array(self.state.step)}
        for k in self.state.m:
            out[f"m/{k}"] = self.state.m[k]
            out[f"v/{k}"] = self.state.v[k]
        return out


def quant_layers(model):
    return [(prefix.rstrip("."), m) for prefix, m in model.named_modules() if isinstance(m, QuantizableLayer)]


def alphas(model):
    return {name: float(layer.alpha.data[0]) for name, layer in quant_layers(model) if layer.alpha is not None}


def _run_epochs(model, head, x, y, cfg, optimizer, log=None):
    rng = rng_for(cfg.seed, f"train/{cfg.stage}/shuffle")
    history = []
    n = len(x)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        model.train()
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                emb = model(Tensor(x[idx]))
                logits = aam_logits(emb, head, y[idx], cfg.margin, cfg.scale)
                loss = ag.softmax_cross_entropy(logits, y[idx])
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"non-finite value at epoch {epoch}, batch {start // cfg.batch_size}: {exc}") from exc
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            for name, layer in quant_layers(model):
                if layer.alpha is not None and not layer.alpha.data[0] >= ALPHA_FLOOR:
                    raise TrainingDivergedError(
                        f"alpha of {name} collapsed to {layer.alpha.data[0]:.3g} at epoch {epoch}"
                    )
            total_loss += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
        record = {"stage": cfg.stage, "epoch": epoch, "lr": lr, "loss": total_loss / n, "accuracy": correct / n}
        if cfg.stage == "qat":
            record["alpha"] = alphas(model)
        if not math.isfinite(record["loss"]):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
        history.append(record)
        if log is not None:
            log(record)
    return history


def train_fp32(model, head, x, y, cfg, log=None):
    """Stage 1: full-precision AAM-softmax training. Returns the epoch history."""
    if cfg.stage != "fp32":
        raise ConfigurationError("train_fp32 needs a stage='fp32' config")
    params = list(model.named_parameters()) + [("head.weight", head.weight)]
    opt = Adam(params, cfg.weight_decay)
    return _run_epochs(model, head, x, np.asarray(y), cfg, opt, log)


def finetune_quantized(model, head, x, y, cfg, scheme, bits, alpha=3.0, log=None):
    """Stage 2: enable fake quantization on every conv/FC weight and fine-tune.

    Master weights and per-layer alphas are both optimized; alphas get no
    weight decay. With ``cfg.epochs == 0`` this is post-training
    quantization.
    """
    if cfg.stage != "qat":
        raise ConfigurationError("finetune_quantized needs a stage='qat' config")
    scheme, bits = QuantScheme.parse(scheme), _check_bits(bits)
    for _, layer in quant_layers(model):
        layer.enable_quantization(scheme, bits, alpha)
    params = list(model.named_parameters()) + [("head.weight", head.weight)]
    alpha_params = [(f"{name}.alpha", layer.alpha) for name, layer in quant_layers(model)]
    opt = Adam(params + alpha_params, cfg.weight_decay, no_decay=[k for k, _ in alpha_params])
    return _run_epochs(model, head, x, np.asarray(y), cfg, opt, log)


def embed(model, x, batch_size=128):
    """Embeddings of ``x`` (N, T, F) in eval mode, without recording a graph."""
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            out.append(model(Tensor(x[start : start + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, 0), np.float32)


def classification_accuracy(model, head, x, y):
    emb = embed(model, x)
    cos = emb @ head.unit_weight().T / np.linalg.norm(emb, axis=1, keepdims=True)
    return float((cos.argmax(axis=1) == np.asarray(y)).mean())


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model, head, model_cfg, meta=None, optimizer=None):
    """Named tensors of model and head plus JSON metadata, as an ``.npz`` file."""
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    arrays["head/weight"] = head.weight.data
    quant = {}
    for name, layer in quant_layers(model):
        if layer.quant is not None:
            s, b, a = layer.quant
            quant[name] = {"scheme": s.value, "bits": b}
            arrays[f"alpha/{name}"] = a.data
    if optimizer is not None:
        arrays.update({f"optim/{k}": v for k, v in optimizer.state_dict().items()})
    info = {
        "model": model_cfg.to_dict(),
        "head": {"margin": head.margin, "scale": head.scale},
        "quant": quant,
        **(meta or {}),
    }
    arrays["meta"] = np.array(json.dumps(info, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write(path, buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, head, meta)`` restored from :func:`save_checkpoint`."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        cfg = ModelConfig(**meta["model"])
        model = build_model(cfg)
        for name, q in meta.get("quant", {}).items():
            layer = dict(quant_layers(model))[name]
            layer.enable_quantization(q["scheme"], q["bits"], float(data[f"alpha/{name}"][0]))
        model.load_state_dict({k[len("model/") :]: data[k] for k in data.files if k.startswith("model/")})
        head = AamHead(cfg.embedding_dim, cfg.n_speakers, meta["head"]["margin"], meta["head"]["scale"])
        head.weight.data = data["head/weight"].astype(np.float32)
    return model, head, meta


# -- estimators ---------------------------------------------------------------


def _encode_labels(y):
    classes, encoded = np.unique(np.asarray(y), return_inverse=True)
    return classes, encoded


class SpeakerEmbedder(TransformerMixin, BaseEstimator):
    """Full-precision speaker embedder trained with AAM-softmax.

    ``fit(X, y)`` takes utterances ``X`` of shape ``(n, frames, dims)`` and
    speaker labels; ``transform`` returns one embedding per utterance.
    """

    def __init__(
        self,
        arch="ecapa-toy",
        channels=64,
        embedding_dim=64,
        epochs=40,
        lr=1e-3,
        decay_epochs=(20, 32),
        decay_ratio=0.1,
        weight_decay=2e-5,
        batch_size=128,
        margin=0.2,
        scale=30.0,
        seed=0,
    ):
        self.arch = arch
        self.channels = channels
        self.embedding_dim = embedding_dim
        self.epochs = epochs
        self.lr = lr
        self.decay_epochs = decay_epochs
        self.decay_ratio = decay_ratio
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.margin = margin
        self.scale = scale
        self.seed = seed

    def _train_config(self, stage):
        return TrainConfig(
            stage, self.epochs, self.lr, self.decay_epochs, self.decay_ratio,
            self.weight_decay, self.batch_size, self.seed, self.margin, self.scale,
        )

    def fit(self, X, y):
        X = check_array(X, allow_nd=True, dtype=np.float32)
        self.classes_, y_enc = _encode_labels(y)
        self.n_features_in_ = X.shape[-1]
        self.model_config_ = ModelConfig(
            self.arch, X.shape[-1], self.channels, self.embedding_dim, len(self.classes_), self.seed
        )
        self.model_ = build_model(self.model_config_)
        self.head_ = AamHead(self.embedding_dim, len(self.classes_), self.margin, self.scale, self.seed)
        self.history_ = train_fp32(self.model_, self.head_, X, y_enc, self._train_config("fp32"))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        return embed(self.model_, X)


class QuantizedSpeakerEmbedder(TransformerMixin, BaseEstimator):
    """Quantization-aware fine-tuning of a fitted :class:`SpeakerEmbedder`.

    The base estimator is left untouched; ``fit`` copies its network and
    fine-tunes the copy with fake-quantized weights.
    """

    def __init__(
        self,
        base,
        scheme="uniform",
        bits=8,
        alpha=3.0,
        epochs=20,
        lr=1e-3,
        decay_epochs=(10, 16),
        decay_ratio=0.1,
        weight_decay=2e-5,
        batch_size=128,
        seed=0,
    ):
        self.base = base
        self.scheme = scheme
        self.bits = bits
        self.alpha = alpha
        self.epochs = epochs
        self.lr = lr
        self.decay_epochs = decay_epochs
        self.decay_ratio = decay_ratio
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        check_is_fitted(self.base, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        y = np.searchsorted(self.base.classes_, np.asarray(y))
        self.model_ = copy.deepcopy(self.base.model_)
        self.head_ = copy.deepcopy(self.base.head_)
        self.n_features_in_ = X.shape[-1]
        cfg = TrainConfig(
            "qat", self.epochs, self.lr, self.decay_epochs, self.decay_ratio, self.weight_decay,
            self.batch_size, self.seed, self.base.margin, self.base.scale,
        )
        self.history_ = finetune_quantized(self.model_, self.head_, X, y, cfg, self.scheme, self.bits, self.alpha)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        return embed(self.model_, X)
