"""Minimal reverse-mode autodiff over numpy arrays.

Define-by-run tape: every op returns a fresh Tensor holding a closure that
scatters the incoming gradient to its parents.  Complex values are pairs of
real planes (CTensor); complex arithmetic is composed from real ops, so
gradients of complex parameters are the plain per-plane gradients.

No in-place mutation of tracked tensors; parameters are updated between tapes.
"""

from __future__ import annotations

import hashlib
from typing import Callable, NamedTuple

import numpy as np

_CHECK_FINITE = False


def set_check_finite(flag: bool) -> None:
    """Toggle finiteness assertion after every op (slow; for debugging/tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


class GraphError(RuntimeError):
    """Backward pass hit a detached or corrupted graph."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def parameter(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
    return Tensor(arr, requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
    return Tensor(arr)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op in checked mode")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True) if g.dtype != t.data.dtype else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- basic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs >= 2-D operands, got {a.data.shape} @ {b.data.shape}")

    def backward(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def take(a: Tensor, idx, axis: int) -> Tensor:
    idx = np.asarray(idx)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (slice(None),) * axis + (idx,), g)
            _accum(a, full)

    return _make(np.take(a.data, idx, axis=axis), (a,), backward)


def add_at(base: Tensor, vals: Tensor, idx, axis: int) -> Tensor:
    """Copy of base with vals added at the given indices along axis."""
    idx = np.asarray(idx)
    key = (slice(None),) * axis + (idx,)
    out_data = base.data.copy()
    np.add.at(out_data, key, vals.data)

    def backward(g):
        _accum(base, g)
        _accum(vals, g[key])

    return _make(out_data, (base, vals), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    scale = 1.0 / count

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g * scale, a.data.shape).astype(a.data.dtype))

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# ------------------------------------------------------------ element-wise


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0), (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * np.where(mask, 1.0, slope).astype(a.data.dtype))

    return _make(np.where(mask, a.data, slope * a.data), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log1p(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / (1.0 + a.data))

    return _make(np.log1p(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accum(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


def cast(a: Tensor, dtype) -> Tensor:
    def backward(g):
        _accum(a, g.astype(a.data.dtype))

    return _make(a.data.astype(dtype), (a,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ----------------------------------------------------------------- complex


class CTensor(NamedTuple):
    """Complex tensor as paired real/imaginary planes of equal shape."""

    re: Tensor
    im: Tensor

    @property
    def shape(self):
        return self.re.data.shape

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data


def cparameter(arr: np.ndarray, dtype=np.float64) -> CTensor:
    arr = np.asarray(arr)
    return CTensor(parameter(arr.real.astype(dtype)), parameter(arr.imag.astype(dtype)))


def cconstant(arr: np.ndarray, dtype=np.float64) -> CTensor:
    arr = np.asarray(arr)
    return CTensor(constant(arr.real.astype(dtype)), constant(arr.imag.astype(dtype)))


def cadd(a: CTensor, b: CTensor) -> CTensor:
    return CTensor(add(a.re, b.re), add(a.im, b.im))


def cmul(a: CTensor, b: CTensor) -> CTensor:
    return CTensor(sub(mul(a.re, b.re), mul(a.im, b.im)), add(mul(a.re, b.im), mul(a.im, b.re)))


def cmatmul(a: CTensor, b: CTensor) -> CTensor:
    # three real products instead of four: re = p1 - p2, im = p3 - p1 - p2
    p1 = matmul(a.re, b.re)
    p2 = matmul(a.im, b.im)
    p3 = matmul(add(a.re, a.im), add(b.re, b.im))
    return CTensor(sub(p1, p2), sub(p3, add(p1, p2)))


def cmap(f: Callable, a: CTensor) -> CTensor:
    """Apply a real op to both planes (reshape, take, concat slices, ...)."""
    return CTensor(f(a.re), f(a.im))


def crelu(a: CTensor) -> CTensor:
    return CTensor(relu(a.re), relu(a.im))


def cleaky_relu(a: CTensor, slope: float = 0.2) -> CTensor:
    return CTensor(leaky_relu(a.re, slope), leaky_relu(a.im, slope))


def cmodulus(a: CTensor) -> Tensor:
    """Elementwise |z| with gradient guarded at z = 0."""
    re, im = a.re, a.im
    out_data = np.hypot(re.data, im.data)

    def backward(g):
        safe = np.where(out_data > 0, out_data, 1.0)
        scale = g / safe
        _accum(re, scale * re.data)
        _accum(im, scale * im.data)

    return _make(out_data, (re, im), backward)


# -------------------------------------------------------------- batch norm


class BNState:
    """Running statistics for one batch-norm feature row (numpy buffers)."""

    __slots__ = ("mean", "var")

    def __init__(self, width: int, dtype=np.float32):
        self.mean = np.zeros((1, width), dtype=dtype)
        self.var = np.ones((1, width), dtype=dtype)


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    state: BNState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Standardize over the row axis (batch x node), then scale and shift.

    Training mode uses batch statistics and folds them into the running
    buffers; eval mode uses the running buffers only.
    """
    if training:
        if x.data.shape[0] == 0:
            raise ValueError("batch_norm requires a nonempty batch in training mode")
        mu = tmean(x, axis=0, keepdims=True)
        centered = sub(x, mu)
        var = tmean(mul(centered, centered), axis=0, keepdims=True)
        normed = div(centered, sqrt(add(var, constant(np.asarray(eps, dtype=x.data.dtype)))))
        state.mean = ((1.0 - momentum) * state.mean + momentum * mu.data).astype(state.mean.dtype)
        state.var = ((1.0 - momentum) * state.var + momentum * var.data).astype(state.var.dtype)
    else:
        denom = np.sqrt(state.var.astype(x.data.dtype) + eps)
        normed = div(sub(x, constant(state.mean.astype(x.data.dtype))), constant(denom))
    return add(mul(normed, scale), shift)


# ------------------------------------------------------------------- init


def rng_for(seed, name: str) -> np.random.Generator:
    """Deterministic per-(seed, parameter-name) stream."""
    digest = hashlib.sha256(name.encode()).digest()
    key = tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def init_real(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_complex(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32):
    """Plane pair, each N(0, 1/fan_in): total complex variance 2/fan_in."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    re = (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(dtype)
    im = (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(dtype)
    return re, im


# --------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is None:
            continue
        if node.grad is None:
            raise GraphError("gradient missing during backward: graph detached or corrupted")
        node._backward(node.grad)


# ------------------------------------------------------------------- adam


def adam_step(data, grad, m, v, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update, in place on (data, m, v)."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(data.dtype)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.m[k], self.v[k], self.t, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------- gradient check


def finite_diff_check(f: Callable[[], Tensor], params: list[Tensor], probes: int = 64, step: float = 1e-5, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    Probes random coordinates across all parameters; f() must rebuild the
    tape from the current parameter values on every call.  ``floor`` bounds
    the denominator so coordinates whose true derivative is zero (dead units,
    single-neighbor attention) are judged by absolute disagreement against it
    rather than against central-difference roundoff noise; a coordinate whose
    tape gradient is wrongly zero still fails, since the nonzero numeric
    estimate then dominates the ratio.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    sizes = np.array([p.data.size for p in params])
    bounds = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    coords = rng.choice(int(bounds[-1]), size=min(probes, int(bounds[-1])), replace=False)
    worst = 0.0
    for c in sorted(coords):
        pi = int(np.searchsorted(bounds, c, side="right"))
        local = c - (bounds[pi - 1] if pi else 0)
        flat = params[pi].data.reshape(-1)
        saved = flat[local]
        flat[local] = saved + step
        hi = float(f().data)
        flat[local] = saved - step
        lo = float(f().data)
        flat[local] = saved
        numeric = (hi - lo) / (2.0 * step)
        analytic = float(grads[pi].reshape(-1)[local])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst
