"""Toy speaker-embedding networks, the AAM-softmax head and layer accounting.

Two architectures stand in for the large production embedders:

``ecapa-toy``
    three dilated 1-D convolutions over FBank-like frames, statistics
    pooling and a fully-connected embedding layer. The first and last
    convolutions carry most of the weights, the middle one fewer.
``resnet-toy``
    a strided 2-D stem and two residual blocks of two 3x3 convolutions
    each (identity shortcuts), frequency-folded statistics pooling and a
    fully-connected embedding layer. Weights are spread evenly.

Every network can be described without building it as a list of
:class:`LayerDescriptor`, from which parameters, MACs and the exact packed
file size are derived.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from ._random import rng_for
from .autograd import Tensor
from .exceptions import ConfigurationError
from .layers import BatchNorm, Conv1d, Conv2d, Linear, Module, QuantizableLayer, stats_pool
from .packfile import file_nbytes
from .quantizer import QuantScheme, _check_bits

ARCHITECTURES = ("ecapa-toy", "resnet-toy")


@dataclass
class ModelConfig:
    """Architecture and quantization assignment of an embedding network.

    ``channels`` is the conv width (for ``resnet-toy`` the residual width).
    ``quant_scheme``/``quant_bits`` apply to every conv and FC weight; leave
    them ``None`` for a full-precision model.
    """

    arch: str = "ecapa-toy"
    input_dim: int = 64
    channels: int = 64
    embedding_dim: int = 64
    n_speakers: int = 20
    seed: int = 0
    quant_scheme: str = None
    quant_bits: int = None

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        for label in ("input_dim", "channels", "embedding_dim", "n_speakers"):
            if int(getattr(self, label)) < 1:
                raise ConfigurationError(f"{label} must be positive")
        if (self.quant_scheme is None) != (self.quant_bits is None):
            raise ConfigurationError("quant_scheme and quant_bits must be set together")
        if self.quant_scheme is not None:
            self.quant_scheme = QuantScheme.parse(self.quant_scheme).value
            self.quant_bits = _check_bits(self.quant_bits)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LayerDescriptor:
    """Shape-only description of one layer.

    ``positions`` is the number of output positions (frames, or
    time-frequency cells) the layer is evaluated at, used for MACs.
    """

    name: str
    kind: str
    c1: int
    c2: int
    k: int = 1
    positions: int = 1

    @property
    def params(self):
        if self.kind == "conv2d":
            return self.k * self.k * self.c1 * self.c2
        if self.kind == "conv1d":
            return self.k * self.c1 * self.c2
        if self.kind == "fc":
            return self.c1 * self.c2
        if self.kind == "bn":
            return 2 * self.c1
        return 0

    @property
    def macs(self):
        if self.kind in ("conv1d", "conv2d", "fc"):
            return self.params * self.positions
        return 0

    @property
    def quantizable(self):
        return self.kind in ("conv1d", "conv2d", "fc")

    def tensor_shapes(self):
        """``(suffix, shape)`` of every stored tensor, in module order."""
        if self.kind == "conv2d":
            return [("weight", (self.k, self.k, self.c1, self.c2))]
        if self.kind == "conv1d":
            return [("weight", (self.k, self.c1, self.c2))]
        if self.kind == "fc":
            return [("weight", (self.c1, self.c2))]
        if self.kind == "bn":
            return [(s, (self.c1,)) for s in ("weight", "bias", "running_mean", "running_var")]
        return []


def _conv_len(t, k, dilation=1, stride=1, pad=None):
    pad = dilation * (k - 1) // 2 if pad is None else pad
    return (t + 2 * pad - dilation * (k - 1) - 1) // stride + 1


ECAPA_PLAN = (("conv1", 5, 1, 1), ("conv2", 3, 2, 1), ("conv3", 3, 3, 2))  # name, k, dilation, width factor


def describe_layers(cfg, frames=200):
    """Layer descriptors of ``cfg`` for an input of ``frames`` time steps."""
    if isinstance(cfg, (list, tuple)):
        return list(cfg)
    c, f, e = cfg.channels, cfg.input_dim, cfg.embedding_dim
    out = []
    if cfg.arch == "ecapa-toy":
        c_in, t = f, frames
        for i, (name, k, d, widen) in enumerate(ECAPA_PLAN, start=1):
            t = _conv_len(t, k, d)
            out.append(LayerDescriptor(name, "conv1d", c_in, c * widen, k, t))
            out.append(LayerDescriptor(f"bn{i}", "bn", c * widen, c * widen))
            c_in = c * widen
        out.append(LayerDescriptor("pool", "pool", c_in, 2 * c_in))
        out.append(LayerDescriptor("fc", "fc", 2 * c_in, e))
        out.append(LayerDescriptor("bn_emb", "bn", e, e))
        return out
    t, fr = _conv_len(frames, 3, stride=2, pad=1), _conv_len(f, 3, stride=2, pad=1)
    out.append(LayerDescriptor("stem", "conv2d", 1, c, 3, t * fr))
    out.append(LayerDescriptor("bn_stem", "bn", c, c))
    for b in (1, 2):
        for j in (1, 2):
            out.append(LayerDescriptor(f"block{b}.conv{j}", "conv2d", c, c, 3, t * fr))
            out.append(LayerDescriptor(f"block{b}.bn{j}", "bn", c, c))
    pooled = 2 * fr * c
    out.append(LayerDescriptor("pool", "pool", fr * c, pooled))
    out.append(LayerDescriptor("fc", "fc", pooled, e))
    out.append(LayerDescriptor("bn_emb", "bn", e, e))
    return out


def count_params(cfg):
    """Exact number of trainable parameters of the embedding network."""
    return sum(d.params for d in describe_layers(cfg))


def params_in_millions(cfg):
    return count_params(cfg) / 1e6


def count_macs(cfg, input_shape=(200, 64)):
    """Multiply-accumulates for one utterance of ``input_shape = (frames, dims)``."""
    return sum(d.macs for d in describe_layers(cfg, frames=input_shape[0]))


def giga(n):
    return n / 1e9


def model_size_bytes(cfg, bits=None):
    """Exact packed file size.

    Quantizable weights take ``bits`` bits each (default: the config's
    ``quant_bits``; full precision when unset); everything else, including
    batch-norm running statistics, is stored as float32.
    """
    if bits is None and isinstance(cfg, ModelConfig):
        bits = cfg.quant_bits
    specs = []
    for d in describe_layers(cfg):
        for suffix, shape in d.tensor_shapes():
            b = bits if (bits is not None and d.quantizable and suffix == "weight") else 32
            specs.append((f"{d.name}.{suffix}", shape, b))
    return file_nbytes(specs)


class EcapaToy(Module):
    def __init__(self, cfg):
        super().__init__()
        rng = rng_for(cfg.seed, "model/init")
        c_in = cfg.input_dim
        for i, (name, k, d, widen) in enumerate(ECAPA_PLAN, start=1):
            setattr(self, name, Conv1d(c_in, cfg.channels * widen, k, dilation=d, rng=rng))
            setattr(self, f"bn{i}", BatchNorm(cfg.channels * widen))
            c_in = cfg.channels * widen
        self.fc = Linear(2 * c_in, cfg.embedding_dim, rng=rng)
        self.bn_emb = BatchNorm(cfg.embedding_dim)

    def forward(self, x):
        h = x
        for i, (name, *_rest) in enumerate(ECAPA_PLAN, start=1):
            h = ag.relu(getattr(self, f"bn{i}")(getattr(self, name)(h)))
        return self.bn_emb(self.fc(stats_pool(h)))


class ResidualBlock(Module):
    def __init__(self, c, rng):
        super().__init__()
        self.conv1 = Conv2d(c, c, 3, rng=rng)
        self.bn1 = BatchNorm(c)
        self.conv2 = Conv2d(c, c, 3, rng=rng)
        self.bn2 = BatchNorm(c)

    def forward(self, x):
        h = ag.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return ag.relu(ag.add(h, x))


class ResNetToy(Module):
    def __init__(self, cfg):
        super().__init__()
        rng = rng_for(cfg.seed, "model/init")
        c = cfg.channels
        self.stem = Conv2d(1, c, 3, stride=2, rng=rng)
        self.bn_stem = BatchNorm(c)
        self.block1 = ResidualBlock(c, rng)
        self.block2 = ResidualBlock(c, rng)
        fr = _conv_len(cfg.input_dim, 3, stride=2, pad=1)
        self.fc = Linear(2 * fr * c, cfg.embedding_dim, rng=rng)
        self.bn_emb = BatchNorm(cfg.embedding_dim)

    def forward(self, x):
        n, t, f = x.shape
        h = ag.reshape(x, (n, t, f, 1))
        h = ag.relu(self.bn_stem(self.stem(h)))
        h = self.block2(self.block1(h))
        _, t2, f2, c = h.shape
        return self.bn_emb(self.fc(stats_pool(ag.reshape(h, (n, t2, f2 * c)))))


def build_model(cfg):
    """Instantiate the embedding network, deterministically from ``cfg.seed``.

    When the config carries a quantization assignment, fake quantization is
    enabled on every conv and FC layer with the default initial alpha.
    """
    model = EcapaToy(cfg) if cfg.arch == "ecapa-toy" else ResNetToy(cfg)
    if cfg.quant_scheme is not None:
        for _, layer in model.named_modules():
            if isinstance(layer, QuantizableLayer):
                layer.enable_quantization(cfg.quant_scheme, cfg.quant_bits)
    return model


class AamHead(Module):
    """Additive angular margin classifier over speaker directions."""

    def __init__(self, embedding_dim, n_classes, margin=0.2, scale=30.0, seed=0):
        super().__init__()
        self.embedding_dim, self.n_classes = embedding_dim, n_classes
        self.margin, self.scale = margin, scale
        rng = rng_for(seed, "model/head")
        w = rng.normal(size=(n_classes, embedding_dim))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)

    def unit_weight(self):
        w = self.weight.data
        return w / np.linalg.norm(w, axis=1, keepdims=True)

    def cosine(self, emb):
        return ag.cos_angle(emb, self.weight)

    def forward(self, emb, targets):
        return aam_logits(emb, self, targets)


def aam_logits(emb, head, targets, margin=None, scale=None):
    """``s*cos(theta_j)`` for non-target classes and ``s*cos(theta_y + m)`` for the target."""
    m = head.margin if margin is None else margin
    s = head.scale if scale is None else scale
    emb = ag.as_tensor(emb)
    if emb.ndim == 1:
        emb = ag.reshape(emb, (1, -1))
    return ag.angular_margin(head.cosine(emb), targets, m, s)
