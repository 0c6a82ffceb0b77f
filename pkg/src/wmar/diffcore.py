"""Small reverse-mode autodiff engine on top of numpy.

Operations are deliberately coarse (affine, layer norm, GRU cell, ...) with
hand-written backward passes, so a world-model update records a few hundred
nodes instead of tens of thousands. Gradients are accumulated into ``.grad`` of
leaf tensors only; intermediate gradients live in a dict during ``backward``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
CHECK_FINITE = True
_STRAIGHT_THROUGH = True


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def exact_sampling_gradients():
    """Treat categorical samples as constants in backward.

    A sampled one-hot is piecewise constant in its logits, so its true
    derivative is zero. Finite differences see exactly that; inside this
    context the backward pass does too, which lets a whole-model gradient
    check cover every other path without the straight-through surrogate.
    """
    global _STRAIGHT_THROUGH
    prev = _STRAIGHT_THROUGH
    _STRAIGHT_THROUGH = False
    try:
        yield
    finally:
        _STRAIGHT_THROUGH = prev


class _StopGradientTape:
    """Records stop-gradient values on the first call of a wrapped function
    and replays them on later calls."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.pos: int | None = None  # None while recording

    def take(self, data: np.ndarray) -> np.ndarray:
        if self.pos is None:
            self.values.append(data.copy())
            return data
        if self.pos >= len(self.values):
            raise RuntimeError("stop-gradient replay ran past the recorded values")
        out = self.values[self.pos]
        self.pos += 1
        return out

    def wrap(self, f: Callable[[], "Tensor"]) -> Callable[[], "Tensor"]:
        calls = [0]

        def g():
            if calls[0] > 0:
                self.pos = 0
            calls[0] += 1
            return f()

        return g


_SG_TAPE: _StopGradientTape | None = None


@contextlib.contextmanager
def frozen_stop_gradients():
    """Pin every ``stop_gradient`` output to its value on the first call.

    With the tape's ``wrap``-ped function, finite differences then measure
    the gradient of the surrogate objective that backward computes, which
    differs from the derivative of the loss value whenever stop-gradients
    split a term (as in KL balancing).
    """
    global _SG_TAPE
    prev = _SG_TAPE
    _SG_TAPE = _StopGradientTape()
    try:
        yield _SG_TAPE
    finally:
        _SG_TAPE = prev


class Tensor:
    """Dense array with an optional gradient slot and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic sugar -------------------------------------------------
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

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _sigmoid(x) -> np.ndarray:
    """Logistic function via ``tanh``; several times faster than ``exp`` forms."""
    out = np.multiply(x, 0.5)
    if not isinstance(out, np.ndarray) or out.ndim == 0:
        return 0.5 * (1.0 + np.tanh(out))
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


_ONES: dict = {}


def _rowsum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis with keepdims, done as a matrix product.

    numpy's last-axis reductions over short rows are much slower than a
    GEMV against a ones vector.
    """
    n = x.shape[-1]
    key = (n, x.dtype)
    ones = _ONES.get(key)
    if ones is None:
        ones = _ONES[key] = np.ones((n, 1), dtype=x.dtype)
    if x.ndim == 1:
        return x.sum(keepdims=True)
    return (x.reshape(-1, n) @ ones).reshape(x.shape[:-1] + (1,))


def _rowmean(x: np.ndarray) -> np.ndarray:
    return _rowsum(x) * (1.0 / x.shape[-1])


def _check(arr: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    _check(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``."""
    if grad is None:
        if root.size != 1:
            raise ValueError("backward() without a seed gradient needs a scalar root")
        grad = np.ones_like(root.data)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise / structural ops


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=_dtype_of(b)))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.data.dtype))
    return a, b


def _dtype_of(x):
    return x.data.dtype if isinstance(x, Tensor) else np.float64


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def square(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        return (2.0 * g * xd,)

    return _make(xd * xd, (x,), bw, "square")


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([x.data for x in xs], axis=axis), tuple(xs), bw, "stack")


def stop_gradient(x: Tensor) -> Tensor:
    if _SG_TAPE is not None:
        return Tensor(_SG_TAPE.take(x.data))
    return Tensor(x.data)


def maximum(x: Tensor, floor: float) -> Tensor:
    """Clamp from below; the gradient is zero wherever the floor is active."""
    mask = x.data > floor

    def bw(g):
        return (g * mask,)

    return _make(np.maximum(x.data, floor).astype(x.dtype), (x,), bw, "maximum")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Row/elementwise select with a constant boolean mask (broadcastable)."""
    a, b = _pair(a, b)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data, b.data)
    shape = out.shape

    def bw(g):
        ga = np.where(m, g, 0.0).astype(g.dtype)
        gb = np.where(m, 0.0, g).astype(g.dtype)
        return _unbroadcast(np.broadcast_to(ga, shape), a.shape), _unbroadcast(
            np.broadcast_to(gb, shape), b.shape
        )

    return _make(out, (a, b), bw, "where")


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[i, index[i]]`` for a 2-D tensor."""
    rows = np.arange(x.shape[0])
    idx = np.asarray(index)

    def bw(g):
        out = np.zeros_like(x.data)
        out[rows, idx] = g
        return (out,)

    return _make(x.data[rows, idx], (x,), bw, "pick")


# ---------------------------------------------------------------------------
# dense building blocks


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for ``x`` of shape [in] or [batch, in]."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.shape[-1] != W.shape[0] or b.shape != W.shape[1:]:
        raise ValueError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    xd, Wd = x.data, W.data

    def bw(g):
        if xd.ndim == 1:
            gW = np.outer(xd, g)
            gb = g
        else:
            gW = xd.T @ g
            gb = g.sum(axis=0)
        return g @ Wd.T, gW, gb

    return _make(xd @ Wd + b.data, (x, W, b), bw, "affine")


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("layer_norm over a zero-length row")
    if scale.shape != (n,) or shift.shape != (n,):
        raise ValueError("layer_norm scale/shift must match the last dimension")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    sd = scale.data

    def bw(g):
        dxhat = g * sd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * sd + shift.data, (x, scale, shift), bw, "layer_norm")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), bw, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - t * t),)

    return _make(t, (x,), bw, "tanh")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def bw(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _make(xd * s, (x,), bw, "silu")


def gru_cell(h: Tensor, inp: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor) -> Tensor:
    """Standard GRU step.

    Gate layout along the last axis of ``Wx``/``Wh``/``b`` is
    [reset | update | candidate]; the reset gate scales the recurrent part of
    the candidate: ``c = tanh(Wx_c x + r * (Wh_c h) + b_c)``.
    ``h' = (1 - u) * h + u * c``.
    """
    h, inp = as_tensor(h), as_tensor(inp)
    H = h.shape[-1]
    if Wh.shape != (H, 3 * H) or Wx.shape != (inp.shape[-1], 3 * H) or b.shape != (3 * H,):
        raise ValueError(
            f"gru_cell shape mismatch: h{h.shape} x{inp.shape} Wx{Wx.shape} Wh{Wh.shape} b{b.shape}"
        )
    hd, xd = h.data, inp.data
    gx = xd @ Wx.data + b.data
    gh = hd @ Wh.data
    r = _sigmoid(gx[..., :H] + gh[..., :H])
    u = _sigmoid(gx[..., H : 2 * H] + gh[..., H : 2 * H])
    ghc = gh[..., 2 * H :]
    c = np.tanh(gx[..., 2 * H :] + r * ghc)
    out = (1.0 - u) * hd + u * c

    def bw(g):
        dc_pre = g * u * (1.0 - c * c)
        du_pre = g * (c - hd) * u * (1.0 - u)
        dr_pre = dc_pre * ghc * r * (1.0 - r)
        d_gx = np.concatenate([dr_pre, du_pre, dc_pre], axis=-1)
        d_gh = np.concatenate([dr_pre, du_pre, dc_pre * r], axis=-1)
        if xd.ndim == 1:
            gWx, gWh, gb = np.outer(xd, d_gx), np.outer(hd, d_gh), d_gx
        else:
            gWx, gWh, gb = xd.T @ d_gx, hd.T @ d_gh, d_gx.sum(axis=0)
        dh = g * (1.0 - u) + d_gh @ Wh.data.T
        return dh, d_gx @ Wx.data.T, gWx, gWh, gb

    return _make(out, (h, inp, Wx, Wh, b), bw, "gru_cell")


def _ln_forward(pre: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Normalise rows of ``pre`` in place; returns (xhat, 1/std)."""
    pre -= _rowmean(pre)
    inv = _rowmean(pre * pre)
    inv += eps
    np.sqrt(inv, out=inv)
    np.divide(1.0, inv, out=inv)
    pre *= inv
    return pre, inv


def _ln_backward(dxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    n = dxhat.shape[-1]
    a = _rowsum(dxhat)
    c = _rowsum(dxhat * xhat)
    a *= 1.0 / n
    c *= 1.0 / n
    dx = xhat * c
    np.subtract(dxhat, dx, out=dx)
    dx -= a
    dx *= inv
    return dx


def dense_ln_silu(x: Tensor, W: Tensor, b: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Fused ``silu(layer_norm(affine(x, W, b), scale, shift))``; one graph node."""
    xd, Wd, sd = x.data, W.data, scale.data
    pre = xd @ Wd
    pre += b.data
    xhat, inv = _ln_forward(pre, eps)
    y = xhat * sd
    y += shift.data
    s = _sigmoid(y)

    def bw(g):
        dy = 1.0 - s
        dy *= y
        dy += 1.0
        dy *= s
        dy *= g
        dxhat = dy * sd
        dpre = _ln_backward(dxhat, xhat, inv)
        dyx = dy * xhat
        if xd.ndim == 1:
            gW, gb = np.outer(xd, dpre), dpre
            gscale, gshift = dyx, dy
        else:
            gW, gb = xd.T @ dpre, dpre.sum(axis=0)
            gscale, gshift = dyx.sum(axis=0), dy.sum(axis=0)
        return dpre @ Wd.T, gW, gb, gscale, gshift

    return _make(y * s, (x, W, b, scale, shift), bw, "dense_ln_silu")


# ---------------------------------------------------------------------------
# categorical machinery; logits are [..., units * classes] or [..., classes]


def _np_softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_log_softmax(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    return v - m - np.log(np.exp(v - m).sum(axis=-1, keepdims=True))


def _grouped(x: np.ndarray, classes: int) -> np.ndarray:
    return x.reshape(x.shape[:-1] + (x.shape[-1] // classes, classes))


def softmax(x: Tensor, classes: int | None = None) -> Tensor:
    classes = classes or x.shape[-1]
    shape = x.shape
    p = _np_softmax(_grouped(x.data, classes))

    def bw(g):
        gg = _grouped(g, classes)
        return ((p * (gg - (gg * p).sum(axis=-1, keepdims=True))).reshape(shape),)

    return _make(p.reshape(shape), (x,), bw, "softmax")


def log_softmax(x: Tensor, classes: int | None = None) -> Tensor:
    classes = classes or x.shape[-1]
    shape = x.shape
    lp = _np_log_softmax(_grouped(x.data, classes))
    p = np.exp(lp)

    def bw(g):
        gg = _grouped(g, classes)
        return ((gg - p * gg.sum(axis=-1, keepdims=True)).reshape(shape),)

    return _make(lp.reshape(shape), (x,), bw, "log_softmax")


def categorical_entropy(logits: Tensor) -> Tensor:
    """Entropy (nats) of softmax(logits) along the last axis."""
    lp = _np_log_softmax(logits.data)
    p = np.exp(lp)
    ent = -(p * lp).sum(axis=-1)

    def bw(g):
        # dH/dl_j = -p_j (lp_j + H)
        return (-p * (lp + ent[..., None]) * g[..., None],)

    return _make(ent, (logits,), bw, "categorical_entropy")


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one class index per row of ``probs`` [..., classes]."""
    u = rng.random(probs.shape[:-1])
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def categorical_sample_st(logits: Tensor, rng: np.random.Generator, classes: int | None = None) -> Tensor:
    """One-hot sample per unit with straight-through gradients.

    The forward value is exactly one-hot; the backward pass is that of
    ``softmax(logits)``.
    """
    classes = classes or logits.shape[-1]
    shape = logits.shape
    p = _np_softmax(_grouped(logits.data, classes))
    idx = sample_categorical(p, rng)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)

    def bw(g):
        gg = _grouped(g, classes)
        return ((p * (gg - (gg * p).sum(axis=-1, keepdims=True))).reshape(shape),)

    parents = (logits,) if _STRAIGHT_THROUGH else ()
    return _make(onehot.reshape(shape), parents, bw, "categorical_sample_st")


def kl_categorical(p_logits: Tensor, q_logits: Tensor, classes: int | None = None) -> Tensor:
    """KL(P || Q) between per-unit softmax distributions, summed over units.

    Returns one value per leading index (a scalar for a single row).
    """
    p_logits, q_logits = as_tensor(p_logits), as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ValueError("kl_categorical needs matching shapes")
    classes = classes or p_logits.shape[-1]
    shape = p_logits.shape
    lp = _np_log_softmax(_grouped(p_logits.data, classes))
    lq = _np_log_softmax(_grouped(q_logits.data, classes))
    p = np.exp(lp)
    q = np.exp(lq)
    d = lp - lq
    per_unit = (p * d).sum(axis=-1)
    out = per_unit.sum(axis=-1)

    def bw(g):
        g3 = np.asarray(g)[..., None, None]
        gp = p * (d - per_unit[..., None]) * g3
        gq = (q - p) * g3
        return gp.reshape(shape), gq.reshape(shape)

    return _make(np.asarray(out), (p_logits, q_logits), bw, "kl_categorical")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against targets."""
    ld = logits.data
    t = np.asarray(targets, dtype=ld.dtype)
    out = np.maximum(ld, 0) - ld * t + np.log1p(np.exp(-np.abs(ld)))
    s = _sigmoid(ld)

    def bw(g):
        return (g * (s - t),)

    return _make(out.astype(ld.dtype), (logits,), bw, "bce_with_logits")


# ---------------------------------------------------------------------------
# MLPs


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, dtype=np.float32, scale: float = 1.0):
    limit = scale * math.sqrt(6.0 / (n_in + n_out))
    W = rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)
    return parameter(W), parameter(np.zeros(n_out, dtype=dtype))


class MLP:
    """``layers`` × (affine → layer norm → SiLU) followed by a linear output."""

    def __init__(
        self,
        rng: np.random.Generator,
        n_in: int,
        hidden: int,
        n_out: int,
        layers: int = 2,
        dtype=np.float32,
        out_scale: float = 1.0,
    ):
        self.params: dict[str, Tensor] = {}
        width = n_in
        for i in range(layers):
            W, b = init_linear(rng, width, hidden, dtype)
            self.params[f"W{i}"], self.params[f"b{i}"] = W, b
            self.params[f"ln{i}_scale"] = parameter(np.ones(hidden, dtype=dtype))
            self.params[f"ln{i}_shift"] = parameter(np.zeros(hidden, dtype=dtype))
            width = hidden
        W, b = init_linear(rng, width, n_out, dtype, scale=out_scale)
        self.params["Wout"], self.params["bout"] = W, b
        self.layers = layers

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        for i in range(self.layers):
            x = dense_ln_silu(x, p[f"W{i}"], p[f"b{i}"], p[f"ln{i}_scale"], p[f"ln{i}_shift"])
        return affine(x, p["Wout"], p["bout"])

    def composed(self, x: Tensor) -> Tensor:
        """Same function built from the unfused primitives (reference path)."""
        p = self.params
        for i in range(self.layers):
            x = affine(x, p[f"W{i}"], p[f"b{i}"])
            x = silu(layer_norm(x, p[f"ln{i}_scale"], p[f"ln{i}_shift"]))
        return affine(x, p["Wout"], p["bout"])

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Gradient-free forward pass on raw arrays (fast path for acting)."""
        p = self.params
        for i in range(self.layers):
            x = x @ p[f"W{i}"].data
            x += p[f"b{i}"].data
            x, _ = _ln_forward(x, 1e-5)
            x *= p[f"ln{i}_scale"].data
            x += p[f"ln{i}_shift"].data
            x *= _sigmoid(x)
        return x @ p["Wout"].data + p["bout"].data


def np_gru(h: np.ndarray, x: np.ndarray, Wx: np.ndarray, Wh: np.ndarray, b: np.ndarray) -> np.ndarray:
    H = h.shape[-1]
    gx = x @ Wx + b
    gh = h @ Wh
    r = _sigmoid(gx[..., :H] + gh[..., :H])
    u = _sigmoid(gx[..., H : 2 * H] + gh[..., H : 2 * H])
    c = np.tanh(gx[..., 2 * H :] + r * gh[..., 2 * H :])
    return (1.0 - u) * h + u * c


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with global gradient-norm clipping."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 4e-4,
        eps: float = 1e-8,
        clip: float | None = 100.0,
        betas: tuple[float, float] = (0.9, 0.999),
    ):
        self.params = params
        self.lr, self.eps, self.clip = lr, eps, clip
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update from the accumulated grads; returns the pre-clip grad norm."""
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise NonFiniteError("non-finite gradient norm")
        factor = 1.0
        if self.clip is not None and norm > self.clip:
            factor = self.clip / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            p = self.params[k]
            if factor != 1.0:
                g = g * factor
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return norm

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v, copy=True) for k, v in state["m"].items()}
        self.v = {k: np.array(v, copy=True) for k, v in state["v"].items()}


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call and be deterministic (reseed any RNG inside it). The per-entry error
    is ``|a - n| / max(|a|, |n|, floor)``. ``max_entries`` limits how many
    entries per parameter are probed (chosen with ``rng``).
    """
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: non-finite output")
    out.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(0.0, tol=tol)
    with no_grad():
        for k, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError("grad_check: non-finite output under perturbation")
                num = (fp - fm) / (2 * step)
                a = float(analytic[k].reshape(-1)[i])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
            report.per_param[k] = worst
            report.max_rel_err = max(report.max_rel_err, worst)
    return report
