"""Learnable-clip weight quantization with straight-through gradients.

A weight tensor is normalized by its own mean and standard deviation,
clipped to ``[-alpha, alpha]`` and projected onto a symmetric level set
that always contains zero. Two level families are provided:

* uniform: ``{0, +-k/(2**(b-1) - 1)} * alpha`` for ``k = 1 .. 2**(b-1) - 1``
* powers of two: ``{0, +-2**e} * alpha`` for ``e = -2**(b-1) + 2 .. 0``

Both have ``2**b - 1`` members. A code is the index of a level in the
ascending level array, so codes live in ``[0, 2**b - 2]``.

Projection picks the nearest level with ties going away from zero. The
decision is made with exact float64 comparisons against level midpoints,
so a value that sits exactly halfway between two rational levels is
always treated as a tie even when the float32 level values are not
symmetric around it.
"""

import dataclasses
import warnings
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autograd import Tensor, _record, as_tensor
from .exceptions import ConfigurationError, CorruptionError, DimensionError, SigmaFloorWarning

SIGMA_FLOOR = 1e-8
MIN_BITS, MAX_BITS = 2, 8


class QuantScheme(str, Enum):
    UNIFORM = "uniform"
    POT = "pot"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown quantization scheme {value!r}") from None


def _check_bits(bits):
    if int(bits) != bits or not MIN_BITS <= bits <= MAX_BITS:
        raise ConfigurationError(f"bitwidth must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")
    return int(bits)


def _check_alpha(alpha):
    alpha = float(alpha)
    if not np.isfinite(alpha) or alpha <= 0:
        raise ConfigurationError(f"alpha must be a positive finite number, got {alpha!r}")
    return alpha


def n_levels(bits):
    return 2 ** _check_bits(bits) - 1


@dataclass(frozen=True)
class QuantizerConfig:
    """Per-layer quantizer state: scheme, bitwidth, clip value and normalization stats."""

    scheme: QuantScheme
    bits: int
    alpha: float = 3.0
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scheme", QuantScheme.parse(self.scheme))
        object.__setattr__(self, "bits", _check_bits(self.bits))
        object.__setattr__(self, "alpha", float(np.float32(_check_alpha(self.alpha))))
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma!r}")
        object.__setattr__(self, "mu", float(np.float32(self.mu)))
        object.__setattr__(self, "sigma", float(np.float32(self.sigma)))

    @property
    def levels(self):
        return QuantLevels(self.scheme, self.alpha, self.bits)


def unit_magnitudes(scheme, bits):
    """Positive levels for ``alpha = 1``, ascending, as float64."""
    scheme, bits = QuantScheme.parse(scheme), _check_bits(bits)
    half = 2 ** (bits - 1) - 1
    if scheme is QuantScheme.UNIFORM:
        return np.arange(1, half + 1, dtype=np.float64) / half
    exponents = np.arange(-(2 ** (bits - 1)) + 2, 1)
    return np.ldexp(1.0, exponents)


@dataclass(frozen=True)
class QuantLevels:
    """The sorted level set ``q(alpha, b)`` of one layer."""

    scheme: QuantScheme
    alpha: float
    bits: int

    def __post_init__(self):
        object.__setattr__(self, "scheme", QuantScheme.parse(self.scheme))
        object.__setattr__(self, "alpha", _check_alpha(self.alpha))
        object.__setattr__(self, "bits", _check_bits(self.bits))

    @property
    def half(self):
        return 2 ** (self.bits - 1) - 1

    @cached_property
    def magnitudes(self):
        # float64 products; alpha * k / d is a single correctly rounded division
        if self.scheme is QuantScheme.UNIFORM:
            k = np.arange(1, self.half + 1, dtype=np.float64)
            return self.alpha * k / self.half
        return self.alpha * unit_magnitudes(self.scheme, self.bits)

    @cached_property
    def values(self):
        mags = self.magnitudes
        full = np.concatenate([-mags[::-1], [0.0], mags])
        return full.astype(np.float32)

    def __len__(self):
        return 2 * self.half + 1

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def _magnitude_index(self, ax):
        """Index into ``[0, magnitudes...]`` of the nearest level to ``ax >= 0``."""
        if self.scheme is QuantScheme.UNIFORM:
            # compare 2*|x|*d with (2k+1)*alpha; both sides exact in float64
            keys = 2.0 * ax * self.half
            bounds = (2.0 * np.arange(self.half) + 1.0) * self.alpha
        else:
            mags = self.magnitudes
            bounds = np.concatenate([[mags[0] / 2], (mags[:-1] + mags[1:]) / 2])
            keys = ax
        return np.searchsorted(bounds, keys, side="right")


def uniform_levels(alpha, bits):
    return QuantLevels(QuantScheme.UNIFORM, alpha, bits)


def pot_levels(alpha, bits):
    return QuantLevels(QuantScheme.POT, alpha, bits)


def make_levels(scheme, alpha, bits):
    return QuantLevels(scheme, alpha, bits)


@dataclass
class QuantizedTensor:
    """Level codes of a tensor together with the config needed to dequantize them."""

    codes: np.ndarray
    config: QuantizerConfig
    shape: tuple = field(default=None)

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        if self.shape is None:
            self.shape = self.codes.shape
        self.shape = tuple(int(s) for s in self.shape)
        self.codes = self.codes.reshape(self.shape)

    @property
    def levels(self):
        return self.config.levels

    def validate(self):
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= len(self.levels)):
            raise CorruptionError(f"code out of range for {len(self.levels)} levels")
        return self

    def values(self):
        """Quantized weights in the normalized domain."""
        self.validate()
        return self.levels.values[self.codes]


def _raw(w):
    return w.data if isinstance(w, Tensor) else np.asarray(w)


def normalize(w):
    """Return ``((w - mu) / sigma, mu, sigma)`` with population std floored at 1e-8."""
    w = np.asarray(_raw(w), dtype=np.float64)
    if w.size == 0:
        raise DimensionError("cannot normalize an empty tensor")
    mu = w.mean()
    sigma = w.std()
    if sigma < SIGMA_FLOOR:
        warnings.warn("weights have zero variance; sigma floored", SigmaFloorWarning, stacklevel=2)
        sigma = SIGMA_FLOOR
    mu32, sigma32 = np.float32(mu), np.float32(sigma)
    return ((w - mu32) / sigma32).astype(np.float32), float(mu32), float(sigma32)


def clip(w_norm, alpha):
    alpha = _check_alpha(alpha)
    w = _raw(w_norm)
    return np.clip(w, -alpha, alpha).astype(w.dtype if w.dtype.kind == "f" else np.float32)


def project(w_clipped, levels):
    """Map every value to the code of its nearest level (ties away from zero)."""
    x = np.asarray(_raw(w_clipped), dtype=np.float64)
    mag = levels._magnitude_index(np.abs(x))
    sign = np.where(x < 0, -1, 1)
    codes = (levels.half + sign * mag).astype(np.uint8)
    cfg = QuantizerConfig(levels.scheme, levels.bits, levels.alpha)
    return QuantizedTensor(codes, cfg)


def quantize(w, cfg, refit=True):
    """Normalize, clip and project ``w``.

    With ``refit`` the normalization statistics are recomputed from ``w``;
    otherwise ``cfg.mu`` and ``cfg.sigma`` are used as given.
    """
    if refit:
        w_norm, mu, sigma = normalize(w)
    else:
        mu, sigma = cfg.mu, cfg.sigma
        w_norm = ((np.asarray(_raw(w), dtype=np.float64) - np.float32(mu)) / np.float32(sigma)).astype(np.float32)
    q = project(clip(w_norm, cfg.alpha), cfg.levels)
    q.config = dataclasses.replace(cfg, mu=mu, sigma=sigma)
    return q


def dequantize(q):
    """Effective forward weights ``sigma * level[code] + mu`` in float32."""
    vals = q.values()
    return (np.float32(q.config.sigma) * vals + np.float32(q.config.mu)).astype(np.float32)


class QuantError(NamedTuple):
    total: float
    average: float


def quant_error(w, q):
    """Squared error between normalized weights and their quantized levels."""
    w = np.asarray(_raw(w), dtype=np.float64)
    if w.shape != q.shape:
        raise DimensionError(f"weight shape {w.shape} != quantized shape {q.shape}")
    w_norm = (w - np.float32(q.config.mu)) / np.float32(q.config.sigma)
    total = float(np.sum((w_norm - q.values().astype(np.float64)) ** 2))
    return QuantError(total, total / max(w.size, 1))


def alpha_grad_factor(w_norm, w_hat, alpha):
    """Elementwise straight-through ``dW_hat / dalpha``."""
    alpha = _check_alpha(alpha)
    w_norm = np.asarray(w_norm, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    return np.where(np.abs(w_norm) > alpha, np.sign(w_norm), (w_hat - w_norm) / alpha)


def ste_backward_alpha(w_norm, q, alpha, upstream_grad):
    """Scalar ``dL/dalpha`` summed over all elements (normalized domain)."""
    w_hat = q.values() if isinstance(q, QuantizedTensor) else q
    w_norm = np.asarray(_raw(w_norm))
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    if w_norm.shape != np.shape(w_hat) or (upstream.ndim and upstream.shape != w_norm.shape):
        raise DimensionError("ste_backward_alpha operands must share a shape")
    return float(np.sum(upstream * alpha_grad_factor(w_norm, w_hat, alpha)))


def ste_backward_w(upstream_grad):
    """Straight-through weight gradient: the identity."""
    return np.array(upstream_grad, copy=True)


def fake_quantize(weight, alpha, scheme, bits):
    """Differentiable quantize-dequantize of ``weight`` with learnable ``alpha``.

    The output is exactly ``dequantize(quantize(weight))``. Gradients reach
    the master weight unchanged and reach ``alpha`` through the
    straight-through rule; mean and std are constants in backward.
    """
    weight, alpha = as_tensor(weight), as_tensor(alpha)
    a = float(alpha.data.reshape(-1)[0])
    cfg = QuantizerConfig(scheme, bits, a)
    w_norm, mu, sigma = normalize(weight.data)
    q = project(clip(w_norm, cfg.alpha), cfg.levels)
    q.config = dataclasses.replace(cfg, mu=mu, sigma=sigma)
    w_hat = q.values()
    out = dequantize(q)

    def bw(g):
        g_alpha = sigma * ste_backward_alpha(w_norm, w_hat, cfg.alpha, g)
        return ste_backward_w(g), np.full(alpha.shape, g_alpha)

    result = _record(out, (weight, alpha), bw, "fake_quantize")
    result.quantized = q
    return result


class WeightQuantizer(TransformerMixin, BaseEstimator):
    """Quantize-dequantize transformer for a single weight array.

    ``fit`` records the normalization statistics; ``transform`` maps any
    array onto the fitted level grid and back to the weight domain.

    Parameters
    ----------
    scheme : {"uniform", "pot"}
    bits : int
        Bitwidth in ``[2, 8]``.
    alpha : float
        Clip value in the normalized domain.
    """

    def __init__(self, scheme="uniform", bits=8, alpha=3.0):
        self.scheme = scheme
        self.bits = bits
        self.alpha = alpha

    def fit(self, X, y=None):
        X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float32)
        _, mu, sigma = normalize(X)
        self.config_ = QuantizerConfig(self.scheme, self.bits, self.alpha, mu, sigma)
        self.levels_ = self.config_.levels.values
        return self

    def quantize(self, X):
        check_is_fitted(self, "config_")
        X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float32)
        return quantize(X, self.config_, refit=False)

    def transform(self, X):
        return dequantize(self.quantize(X))

    def quantization_error(self, X):
        X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float32)
        return quant_error(X, self.quantize(X)).average
