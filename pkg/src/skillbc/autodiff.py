"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Just the ops the training losses need: elementwise arithmetic, matmul,
tanh/sigmoid/exp/log, reductions, concat/slice and clip. Graphs are built
eagerly; `backward` walks the tape in reverse topological order with a fixed
accumulation order, so gradients are bit-reproducible run to run.
"""

from __future__ import annotations

import numpy as np

from .errors import TrainingError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph construction (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Var:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Var(shape={self.data.shape})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar):
        if isinstance(scalar, Var):
            raise TypeError("Var/Var division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(scalar))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- backward ----------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every reachable node."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if not np.all(np.isfinite(self.data)):
            raise TrainingError(f"non-finite loss: {self.data.item()!r}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _accum(node: Var, g: np.ndarray):
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitive ops -----------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out_data = a.data + b.data
    if not _GRAD_ENABLED:
        return Var(out_data)

    def vjp(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Var(out_data, (a, b), vjp)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out_data = a.data * b.data
    if not _GRAD_ENABLED:
        return Var(out_data)

    def vjp(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Var(out_data, (a, b), vjp)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out_data = a.data @ b.data
    if not _GRAD_ENABLED:
        return Var(out_data)

    def vjp(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Var(out_data, (a, b), vjp)


def power(a, exponent) -> Var:
    a = as_var(a)
    e = float(exponent)
    out_data = a.data ** e
    if not _GRAD_ENABLED:
        return Var(out_data)

    def vjp(g):
        _accum(a, g * e * a.data ** (e - 1.0))

    return Var(out_data, (a,), vjp)


def square(a) -> Var:
    a = as_var(a)
    out_data = a.data * a.data
    if not _GRAD_ENABLED:
        return Var(out_data)

    def vjp(g):
        _accum(a, g * 2.0 * a.data)

    return Var(out_data, (a,), vjp)


def tanh(a) -> Var:
    a = as_var(a)
    out_data = np.tanh(a.data)
    if not _GRAD_ENABLED:
        return Var(out_data)

    def vjp(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return Var(out_data, (a,), vjp)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Var:
    a = as_var(a)
    out_data = _stable_sigmoid(a.data)
    if not _GRAD_ENABLED:
        return Var(out_data)

    def vjp(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return Var(out_data, (a,), vjp)


def exp(a) -> Var:
    a = as_var(a)
    out_data = np.exp(a.data)
    if not _GRAD_ENABLED:
        return Var(out_data)

    def vjp(g):
        _accum(a, g * out_data)

    return Var(out_data, (a,), vjp)


def log(a) -> Var:
    a = as_var(a)
    out_data = np.log(a.data)
    if not _GRAD_ENABLED:
        return Var(out_data)

    def vjp(g):
        _accum(a, g / a.data)

    return Var(out_data, (a,), vjp)


def clip(a, lo: float, hi: float) -> Var:
    """Clamp with pass-through gradient inside [lo, hi], zero outside."""
    a = as_var(a)
    out_data = np.clip(a.data, lo, hi)
    if not _GRAD_ENABLED:
        return Var(out_data)
    mask = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        _accum(a, g * mask)

    return Var(out_data, (a,), vjp)


def vsum(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _GRAD_ENABLED:
        return Var(out_data)
    shape = a.data.shape

    def vjp(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, shape).astype(np.float64, copy=True))

    return Var(out_data, (a,), vjp)


def vmean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(parts, axis=1) -> Var:
    parts = [as_var(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    if not _GRAD_ENABLED:
        return Var(out_data)
    sizes = [p.data.shape[axis] for p in parts]

    def vjp(g):
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accum(p, g[tuple(idx)])
            offset += n

    return Var(out_data, tuple(parts), vjp)


def take(a, idx) -> Var:
    a = as_var(a)
    out_data = a.data[idx]
    if not _GRAD_ENABLED:
        return Var(out_data)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        _accum(a, full)

    return Var(out_data, (a,), vjp)


# -- gradient collection and checking ----------------------------------------


def collect_gradients(loss: Var, params) -> dict[str, np.ndarray]:
    """Backprop `loss` and return name -> gradient for every parameter.

    Parameters not reachable from the loss get a zero gradient of the right
    shape, per contract.
    """
    for p in params:
        p.grad = None
    loss.backward()
    grads = {}
    for p in params:
        if p.grad is None:
            grads[p.name] = np.zeros_like(p.data)
        else:
            grads[p.name] = p.grad
    return grads


def finite_difference(loss_fn, params, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradients of loss_fn() w.r.t. each param element."""
    grads = {}
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(loss_fn().data)
            flat[i] = orig - h
            lo = float(loss_fn().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads[p.name] = g
    return grads


def max_relative_error(analytic: dict, numeric: dict) -> float:
    """max_i |g_i - ghat_i| / max(1, |g_i|) over all parameters."""
    worst = 0.0
    for name, g in analytic.items():
        gh = numeric[name]
        denom = np.maximum(1.0, np.abs(g))
        err = np.abs(g - gh) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
