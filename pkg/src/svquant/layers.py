"""Parameter containers and layers built on :mod:`svquant.autograd`."""

from collections import OrderedDict

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import DimensionError
from .quantizer import QuantScheme, _check_alpha, _check_bits, fake_quantize


class Module:
    """Minimal module tree with ordered parameters and buffers."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = np.asarray(array, dtype=np.float32)

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}{name}.")

    def named_parameters(self):
        for prefix, m in self.named_modules():
            for name, p in m._params.items():
                yield prefix + name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        state = OrderedDict()
        for prefix, m in self.named_modules():
            for name, p in m._params.items():
                state[prefix + name] = p.data.copy()
            for name, b in m._buffers.items():
                state[prefix + name] = b.copy()
        return state

    def load_state_dict(self, state):
        expected = set(self.state_dict())
        missing, extra = expected - set(state), set(state) - expected
        if missing or extra:
            raise DimensionError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for prefix, m in self.named_modules():
            for name, p in m._params.items():
                key = prefix + name
                if state[key].shape != p.shape:
                    raise DimensionError(f"{key}: expected {p.shape}, got {state[key].shape}")
                p.data = np.asarray(state[key], dtype=np.float32).copy()
            for name, b in m._buffers.items():
                if state[prefix + name].shape != b.shape:
                    raise DimensionError(f"{prefix + name}: expected {b.shape}, got {state[prefix + name].shape}")
                m._buffers[name] = np.asarray(state[prefix + name], dtype=np.float32).copy()

    def train(self, mode=True):
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class QuantizableLayer(Module):
    """A layer whose ``weight`` can be replaced by its fake-quantized value."""

    def __init__(self):
        super().__init__()
        object.__setattr__(self, "quant", None)
        object.__setattr__(self, "last_quantized", None)

    def enable_quantization(self, scheme, bits, alpha=3.0):
        alpha_t = Tensor(np.array([_check_alpha(alpha)], dtype=np.float32), requires_grad=True)
        object.__setattr__(self, "quant", (QuantScheme.parse(scheme), _check_bits(bits), alpha_t))

    def disable_quantization(self):
        object.__setattr__(self, "quant", None)

    @property
    def alpha(self):
        return None if self.quant is None else self.quant[2]

    def effective_weight(self):
        if self.quant is None:
            return self.weight
        scheme, bits, alpha = self.quant
        w = fake_quantize(self.weight, alpha, scheme, bits)
        object.__setattr__(self, "last_quantized", w.quantized)
        return w


class Conv1d(QuantizableLayer):
    def __init__(self, c1, c2, k, dilation=1, stride=1, rng=None):
        super().__init__()
        self.k, self.c1, self.c2 = k, c1, c2
        self.dilation, self.stride = dilation, stride
        self.pad = dilation * (k - 1) // 2
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(he_normal(rng, (k, c1, c2), k * c1), requires_grad=True)

    def forward(self, x):
        return ag.conv1d(x, self.effective_weight(), self.stride, self.pad, self.dilation)


class Conv2d(QuantizableLayer):
    def __init__(self, c1, c2, k, stride=1, rng=None):
        super().__init__()
        self.k, self.c1, self.c2, self.stride = k, c1, c2, stride
        self.pad = (k - 1) // 2
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(he_normal(rng, (k, k, c1, c2), k * k * c1), requires_grad=True)

    def forward(self, x):
        return ag.conv2d(x, self.effective_weight(), self.stride, self.pad)


class Linear(QuantizableLayer):
    def __init__(self, c1, c2, rng=None):
        super().__init__()
        self.c1, self.c2 = c1, c2
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(he_normal(rng, (c1, c2), c1), requires_grad=True)

    def forward(self, x):
        return ag.matmul(x, self.effective_weight())


class BatchNorm(Module):
    """Batch normalization over all axes but the channel axis (last)."""

    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.c, self.momentum, self.eps = c, momentum, eps
        self.weight = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c))
        self.register_buffer("running_var", np.ones(c))

    def forward(self, x):
        if self.training:
            axes = tuple(range(x.ndim - 1))
            count = x.size // self.c
            mu = x.data.mean(axis=axes, dtype=np.float64)
            v = x.data.var(axis=axes, dtype=np.float64) * count / max(count - 1, 1)
            m = self.momentum
            self._buffers["running_mean"] = ((1 - m) * self._buffers["running_mean"] + m * mu).astype(np.float32)
            self._buffers["running_var"] = ((1 - m) * self._buffers["running_var"] + m * v).astype(np.float32)
            return ag.batchnorm(x, self.weight, self.bias, self.eps)
        inv = (1.0 / np.sqrt(self._buffers["running_var"].astype(np.float64) + self.eps)).astype(np.float32)
        xhat = ag.mul(ag.sub(x, self._buffers["running_mean"]), inv)
        return ag.add(ag.mul(xhat, self.weight), self.bias)


def stats_pool(h, eps=1e-5):
    """Concatenate per-channel mean and std over time: ``(N, T, C) -> (N, 2C)``."""
    mu = ag.mean(h, axis=1)
    sd = ag.sqrt(ag.add(ag.var(h, axis=1), eps))
    return ag.concat([mu, sd], axis=1)
