"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op builds its output with :func:`_record`, which stores
the parent tensors and a closure mapping the upstream gradient to one
gradient per parent. :func:`backward` orders the recorded graph
topologically and runs the closures once each. A graph can be traversed
only once; its closures are released afterwards.

Values default to float32. Gradient checks switch to float64 with
:func:`default_dtype` so that central differences are not dominated by
rounding.
"""

from contextlib import contextmanager

import numpy as np

from .exceptions import ConfigurationError, DimensionError, NonFiniteError, UsageError

_DTYPE = np.float32
_GRAD_ENABLED = True


@contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextmanager
def no_grad():
    """Run forward ops without recording a graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def get_default_dtype():
    return _DTYPE


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def _record(data, parents, backward_fn, op):
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss):
    """Populate ``.grad`` of every tensor reachable from scalar ``loss``.

    Leaf gradients accumulate until cleared with ``zero_grad``; the graph
    itself is consumed and cannot be traversed again.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")

    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed:
            raise UsageError("graph already consumed by a previous backward call")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if not node.is_leaf:
            node._consumed = True
            node._backward = None
            node._parents = ()


# -- elementwise ----------------------------------------------------------


def _binary(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def add(a, b):
    a, b = _binary(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _binary(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _binary(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _binary(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _record(out, (a, b), bw, "div")


def power(x, exponent):
    x = as_tensor(x)
    p = float(exponent)

    def bw(g):
        return (g * p * x.data ** (p - 1),)

    return _record(x.data**p, (x,), bw, "power")


def sqrt(x):
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _record(out, (x,), bw, "sqrt")


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _record(out, (x,), bw, "exp")


def log(x):
    x = as_tensor(x)

    def bw(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _record(out, (x,), bw, "log")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), bw, "relu")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1 - out * out),)

    return _record(out, (x,), bw, "tanh")


# -- shape and reduction ---------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _record(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inverse),)

    return _record(x.data.transpose(axes), (x,), bw, "transpose")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record(out, (x,), bw, "mean")


def var(x, axis=None, keepdims=False):
    """Population variance."""
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True, dtype=np.float64)
    centered = (x.data - mu).astype(x.dtype)
    out = (centered.astype(np.float64) ** 2).mean(axis=axes, keepdims=keepdims).astype(x.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * (2.0 / count) * centered,)

    return _record(out, (x,), bw, "var")


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    """``a @ b`` for 2-D operands, or batched ``(..., k) @ (k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _record(a.data @ b.data, (a, b), bw, "matmul")


def _check_conv_args(stride, pad, dilation):
    for label, value, low in (("stride", stride, 1), ("pad", pad, 0), ("dilation", dilation, 1)):
        if int(value) != value or value < low:
            raise ConfigurationError(f"invalid conv {label}: {value!r}")


def conv1d(x, w, stride=1, pad=0, dilation=1):
    """1-D convolution over time.

    ``x`` is ``(T, c1)`` or ``(N, T, c1)``, ``w`` is ``(k, c1, c2)``; the
    output has length ``floor((T + 2*pad - dilation*(k-1) - 1) / stride) + 1``.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_args(stride, pad, dilation)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or w.ndim != 3 or xd.shape[2] != w.shape[1]:
        raise DimensionError(f"conv1d shape mismatch: x{x.shape} w{w.shape}")
    n, t, c1 = xd.shape
    k, _, c2 = w.shape
    span = dilation * (k - 1) + 1
    if span > t + 2 * pad:
        raise DimensionError(f"kernel span {span} exceeds padded length {t + 2 * pad}")
    t_out = (t + 2 * pad - span) // stride + 1
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0))) if pad else xd
    taps = [slice(j * dilation, j * dilation + stride * (t_out - 1) + 1, stride) for j in range(k)]
    cols = np.concatenate([xp[:, s, :] for s in taps], axis=2).reshape(n * t_out, k * c1)
    w2 = w.data.reshape(k * c1, c2)
    out = (cols @ w2).reshape(n, t_out, c2)

    def bw(g):
        g2 = g.reshape(n * t_out, c2)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ w2.T).reshape(n, t_out, k, c1)
        gxp = np.zeros_like(xp)
        for j, s in enumerate(taps):
            gxp[:, s, :] += gcols[:, :, j, :]
        gx = gxp[:, pad : pad + t, :] if pad else gxp
        return (gx[0] if squeeze else gx), gw

    return _record(out[0] if squeeze else out, (x, w), bw, "conv1d")


def conv2d(x, w, stride=1, pad=0):
    """2-D convolution on ``(N, H, W, c1)`` input with ``(k, k, c1, c2)`` kernels."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_args(stride, pad, 1)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2] or w.shape[0] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: x{x.shape} w{w.shape}")
    n, h, wd, c1 = x.shape
    k, _, _, c2 = w.shape
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise DimensionError(f"kernel {k} exceeds padded input {h + 2 * pad}x{wd + 2 * pad}")
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    taps = [
        (slice(i, i + stride * (h_out - 1) + 1, stride), slice(j, j + stride * (w_out - 1) + 1, stride))
        for i in range(k)
        for j in range(k)
    ]
    cols = np.concatenate([xp[:, si, sj, :] for si, sj in taps], axis=3)
    cols = cols.reshape(n * h_out * w_out, k * k * c1)
    w2 = w.data.reshape(k * k * c1, c2)
    out = (cols @ w2).reshape(n, h_out, w_out, c2)

    def bw(g):
        g2 = g.reshape(-1, c2)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ w2.T).reshape(n, h_out, w_out, k * k, c1)
        gxp = np.zeros_like(xp)
        for t, (si, sj) in enumerate(taps):
            gxp[:, si, sj, :] += gcols[:, :, :, t, :]
        gx = gxp[:, pad : pad + h, pad : pad + wd, :] if pad else gxp
        return gx, gw

    return _record(out, (x, w), bw, "conv2d")


# -- normalization and losses ----------------------------------------------


def batchnorm(x, gamma, beta, eps=1e-5):
    """Batch normalization with batch statistics over every axis but the last."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise DimensionError(f"batchnorm expects ({x.shape[-1]},) affine params")
    axes = tuple(range(x.ndim - 1))
    count = x.size // x.shape[-1]
    mu = x.data.mean(axis=axes, dtype=np.float64)
    v = ((x.data - mu) ** 2).mean(axis=axes)
    inv = (1.0 / np.sqrt(v + eps)).astype(x.dtype)
    xhat = ((x.data - mu) * inv).astype(x.dtype)
    out = xhat * gamma.data + beta.data

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data
        gx = inv / count * (count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bw, "batchnorm")


def log_softmax(logits):
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record(out, (logits,), bw, "log_softmax")


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy of ``(N, C)`` logits against integer targets."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"logits {logits.shape} vs {targets.shape[0]} targets")
    n = targets.shape[0]
    shifted = logits.data.astype(np.float64) - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = (lse - shifted[np.arange(n), targets]).mean()

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        return (float(g) * p / n,)

    return _record(np.asarray(loss), (logits,), bw, "softmax_cross_entropy")


def cos_angle(x, w, eps=1e-12):
    """Cosine between every row of ``x`` (N, d) and every row of ``w`` (C, d)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"cos_angle shape mismatch: {x.shape} vs {w.shape}")
    nx = np.linalg.norm(x.data, axis=1, keepdims=True)
    nw = np.linalg.norm(w.data, axis=1, keepdims=True)
    if np.any(nx <= eps) or np.any(nw <= eps):
        raise NonFiniteError("cos_angle on a zero-norm vector")
    xh, wh = x.data / nx, w.data / nw
    out = xh @ wh.T

    def bw(g):
        gxh = g @ wh
        gwh = g.T @ xh
        gx = (gxh - xh * (gxh * xh).sum(axis=1, keepdims=True)) / nx
        gw = (gwh - wh * (gwh * wh).sum(axis=1, keepdims=True)) / nw
        return gx, gw

    return _record(out, (x, w), bw, "cos_angle")


def angular_margin(cosines, targets, margin, scale):
    """AAM logits: ``s*cos(theta + m)`` on the target column, ``s*cos(theta)`` elsewhere."""
    cosines = as_tensor(cosines)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n = cosines.shape[0]
    rows = np.arange(n)
    c = np.clip(cosines.data[rows, targets].astype(np.float64), -1.0, 1.0)
    out = cosines.data * scale
    # cos(theta + m) = c cos m - sin(theta) sin m
    out[rows, targets] = scale * (c * np.cos(margin) - np.sqrt(1.0 - c * c) * np.sin(margin))
    # d/dc cos(arccos(c) + m) = sin(theta + m) / sin(theta); clamped away from |c| = 1
    theta = np.arccos(np.clip(c, -1 + 1e-7, 1 - 1e-7))
    dtarget = np.sin(theta + margin) / np.sin(theta)

    def bw(g):
        gc = g * scale
        gc[rows, targets] = g[rows, targets] * scale * dtarget
        return (gc,)

    return _record(out, (cosines,), bw, "angular_margin")


# -- finite differences -----------------------------------------------------


def numerical_grad(fn, arrays, index, eps=1e-3):
    """Central-difference gradient of scalar ``fn(*arrays)`` wrt ``arrays[index]``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn(*arrays))
        flat[i] = orig - eps
        lo = float(fn(*arrays))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def gradcheck(fn, arrays, eps=1e-3):
    """Largest relative discrepancy between autodiff and finite differences.

    ``fn`` maps tensors to a scalar tensor. The check runs in float64. The
    relative error of an entry is ``|a - n| / max(1, |a|, |n|)``.
    """
    worst = 0.0
    with default_dtype(np.float64):
        tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        backward(fn(*tensors))

        def scalar(*vals):
            with no_grad():
                return fn(*[Tensor(v) for v in vals]).item()

        for i, t in enumerate(tensors):
            num = numerical_grad(scalar, arrays, i, eps)
            ana = t.grad
            denom = np.maximum(1.0, np.maximum(np.abs(ana), np.abs(num)))
            worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst
