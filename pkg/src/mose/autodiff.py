"""Minimal tape-based reverse-mode autodiff over dense float64 numpy arrays.

Only the ops the MoSE forward pass needs are provided. Broadcasting is
supported for elementwise binary ops in the numpy sense; gradients are
summed back to the operand shape.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of executed ops.

    Used as a context manager; ops created inside the block on tensors that
    require grad are recorded. ``gradient`` replays the record backwards.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], backward: Callable):
        self.nodes.append((out, parents, backward))

    def gradient(self, target: "Tensor", sources: Sequence["Tensor"], seed=None) -> list[np.ndarray]:
        """d(target)/d(source) for each source; zeros for unreached sources."""
        grads: dict[int, np.ndarray] = {}
        if seed is None:
            if target.value.size != 1:
                raise DimensionError(f"gradient target must be scalar, got shape {target.shape}")
            seed = np.ones_like(target.value)
        grads[id(target)] = np.asarray(seed, dtype=np.float64)
        for out, parents, backward in reversed(self.nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            pgrads = backward(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.value) if g is None else g)
        return out


class Tensor:
    __slots__ = ("value", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    q = av / bv
    return _make(q, (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * q / bv, b.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics (ndim >= 2 on both sides)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner axes differ, a{a.shape} axis -1 vs b{b.shape} axis -2")
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(av @ bv, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """x[..., D_in] @ weight[D_in, D_out] + bias[D_out]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-D, got {weight.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear: input axis -1 has size {x.shape[-1]} but weight axis 0 has size {weight.shape[0]}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(
                f"linear: bias axis 0 has size {bias.shape[0] if bias.ndim else 0} "
                f"but weight axis 1 has size {weight.shape[1]}")
    xv, wv = x.value, weight.value
    flat = xv.reshape(-1, xv.shape[-1])
    out = flat @ wv
    if bias is not None:
        out = out + bias.value
    out = out.reshape(xv.shape[:-1] + (wv.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, wv.shape[1])
        gx = (g2 @ wv.T).reshape(xv.shape)
        gw = flat.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.value)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _make(np.log(xv), (x,), lambda g: (g / xv,))


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    mask = x.value >= lo
    return _make(np.where(mask, x.value, lo), (x,), lambda g: (g * mask,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    y = np.logaddexp(0.0, xv)
    sig = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return _make(y, (x,), lambda g: (g * sig,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.value.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.value[idx], (x,), backward)


def repeat(x, repeats: int, axis: int) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        s = list(g.shape)
        ax = axis % g.ndim
        s[ax:ax + 1] = [s[ax] // repeats, repeats]
        return (g.reshape(s).sum(axis=ax + 1),)

    return _make(np.repeat(x.value, repeats, axis=axis), (x,), backward)


def avg_pool_global(x, spatial_axes=(-2, -1)) -> Tensor:
    """Mean over the spatial axes; default layout is channel-first [..., F, H, W]."""
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in spatial_axes)
    if any(x.shape[a] < 1 for a in axes):
        raise DimensionError(f"avg_pool_global: empty spatial axes in shape {x.shape}")
    return mean(x, axis=axes)


def im2col(x, k: int) -> Tensor:
    """Zero-padded k x k patches of a channel-last batch [B, H, W, F] -> [B, H, W, k*k*F]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"im2col expects [B, H, W, F], got {x.shape}")
    if k == 1:
        return x
    b, h, w, f = x.shape
    r = k // 2
    padded = np.pad(x.value, ((0, 0), (r, r), (r, r), (0, 0)))
    cols = [padded[:, i:i + h, j:j + w, :] for i in range(k) for j in range(k)]
    out = np.concatenate(cols, axis=-1)

    def backward(g):
        gp = np.zeros_like(padded)
        t = 0
        for i in range(k):
            for j in range(k):
                gp[:, i:i + h, j:j + w, :] += g[..., t * f:(t + 1) * f]
                t += 1
        return (gp[:, r:r + h, r:r + w, :],)

    return _make(out, (x,), backward)


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).value.copy())


def gradcheck(f: Callable[[Tensor], Tensor], point, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if not np.all(np.isfinite(y.value)):
        raise NumericError("gradcheck: non-finite function value at the point")
    (analytic,) = tape.gradient(y, [x])
    flat = x0.ravel()
    err = 0.0
    for i in range(flat.size):
        vals = []
        for step in (eps, -eps):
            xp = flat.copy()
            xp[i] += step
            v = float(f(Tensor(xp.reshape(x0.shape))).value)
            if not math.isfinite(v):
                raise NumericError(f"gradcheck: non-finite value at coordinate {i}")
            vals.append(v)
        fd = (vals[0] - vals[1]) / (2 * eps)
        a = analytic.ravel()[i]
        err = max(err, abs(a - fd) / max(1.0, abs(a)))
    return err
