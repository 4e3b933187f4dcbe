"""Dense arrays with tape-based reverse-mode differentiation.

Every differentiable primitive returns a new :class:`Tensor` and, when
gradients are being recorded, appends one node to the tape.  A node keeps the
forward operands its adjoint needs and a sequence number; ``backward`` replays
the reachable nodes in decreasing sequence order, which is a valid reverse
topological order and fixes the gradient accumulation order so that repeated
runs are bitwise identical.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes or a scalar.  Adding a per-feature vector to a batch is spelled
explicitly with :func:`add_bias`.

GELU uses the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(0.7978845608028654 * (x + 0.044715 * x**3)))

where 0.7978845608028654 = sqrt(2 / pi).
"""

from __future__ import annotations

import contextlib
import itertools
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "PermutationError",
    "TapeError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "exp",
    "log",
    "gelu",
    "matmul",
    "linear",
    "add_bias",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "take",
    "concat",
    "softmax",
    "log_softmax",
    "logsumexp",
    "layernorm",
    "index_permute",
    "l2_normalize",
    "resize2d",
    "attention",
    "cross_entropy",
    "backward",
    "write_tensor",
    "read_tensor",
]

GELU_C = 0.7978845608028654
GELU_A = 0.044715


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of the operation."""


class PermutationError(ValueError):
    """Index map is not a bijection."""


class TapeError(RuntimeError):
    """Invalid use of the computation tape."""


_seq = itertools.count()
_recording = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def grad_enabled() -> bool:
    return _recording


class _Node:
    __slots__ = ("parents", "backward", "seq", "consumed")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward
        self.seq = next(_seq)
        self.consumed = False


class Tensor:
    """A numpy buffer plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _raise_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(parents, backward)
    return out


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) or x.ndim == 0


def _binary_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are neither equal nor scalar")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # only scalar-vs-tensor broadcasting exists
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("add needs at least one Tensor")
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("sub needs at least one Tensor")
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("mul needs at least one Tensor")
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g * bd, sa), _reduce_to(g * ad, sb)

    return _make(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * c, (a,), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="raise"):
        try:
            y = np.exp(a.data)
        except FloatingPointError as exc:
            raise DomainError("exp overflow") from exc

    def bw(g):
        return (g * y,)

    return _make(y, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    x = a.data

    def bw(g):
        return (g / x,)

    return _make(np.log(x), (a,), bw)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = GELU_C * (x + GELU_A * x * x * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _make(y, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[..., m, k]`` and ``[..., k, n]`` with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., k] @ w[k, n] (+ b[n])`` shared over all leading axes."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: cannot apply weight {w.shape} to input {x.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    y = x2 @ wd
    if b is not None:
        y += b.data
    y = y.reshape(lead + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` along the trailing axes of ``x``; ``b.shape`` must equal ``x.shape[-b.ndim:]``."""
    if b.ndim == 0 or b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: {b.shape} is not a trailing shape of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))

    def bw(g):
        return g, g.sum(axis=lead) if lead else g

    return _make(x.data + b.data, (x, b), bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    y = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(y), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return scale(sum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    y = a.data.reshape(shape)
    return _make(y, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    y = np.transpose(a.data, axes)
    return _make(y, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis."""
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not (isinstance(it, (int, slice, np.integer)) or it is Ellipsis or it is None):
            raise TypeError("getitem supports basic indexing only; use take() for index arrays")
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return _make(np.array(a.data[idx]), (a,), bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the adjoint."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    n = a.shape[axis]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        gm = np.moveaxis(g, axis, 0)
        om = np.moveaxis(out, axis, 0)
        np.add.at(om, indices, gm)
        return (out,)

    return _make(np.take(a.data, indices, axis=axis), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of empty list")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors:
        if t.ndim != nd or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    y = x - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), bw)


def logsumexp(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stabilized ``log(sum(exp(x)))`` along ``axis``.

    ``mask`` (boolean, same shape as ``a``) selects the entries that take part;
    every reduced slice must keep at least one entry.
    """
    axis = _check_axis(a, axis)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"logsumexp: mask {mask.shape} vs input {x.shape}")
        if not mask.any(axis=axis).all():
            raise DomainError("logsumexp: a reduced slice has no unmasked entries")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    y = (m + np.log(s)).squeeze(axis)
    p = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * p,)

    return _make(y, (a,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} for logits {logits.shape}")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    logp = x - lse
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise DomainError("layernorm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    y = xhat * gd + bias.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(y, (x, gain, bias), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    axis = _check_axis(x, axis)
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    den = np.maximum(nrm, eps)
    y = xd / den
    active = nrm > eps

    def bw(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - y * proj) / den, g / den),)

    return _make(y, (x,), bw)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def index_permute(x: Tensor, perm, axis: int = 0) -> Tensor:
    """``out[..., j, ...] = x[..., perm[j], ...]`` along ``axis``.

    The adjoint scatters back through the inverse map; no arithmetic is done
    in either direction.
    """
    perm = np.asarray(perm, dtype=np.intp)
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise PermutationError(f"index map {perm.tolist()} is not a bijection on 0..{n - 1}")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(n)

    def bw(g):
        return (np.take(g, inv, axis=axis),)

    return _make(np.take(x.data, perm, axis=axis), (x,), bw)


def resample_array(x: np.ndarray, rh: np.ndarray, rw: np.ndarray) -> np.ndarray:
    """``out[..., i, j, c] = sum_ab rh[i, a] rw[j, b] x[..., a, b, c]`` (rows first, then columns)."""
    h, w, c = x.shape[-3:]
    lead = x.shape[:-3]
    y = np.matmul(rh, x.reshape(lead + (h, w * c))).reshape(lead + (rh.shape[0], w, c))
    return np.matmul(rw, y)


def resize2d(x: Tensor, rh: np.ndarray, rw: np.ndarray) -> Tensor:
    """Apply separable resampling matrices to the two axes before the last.

    ``x`` has shape ``[..., h, w, c]``; ``rh`` is ``[h', h]`` and ``rw`` is
    ``[w', w]``.  The result is ``[..., h', w', c]``.
    """
    if x.ndim < 3 or rh.shape[1] != x.shape[-3] or rw.shape[1] != x.shape[-2]:
        raise ShapeError(f"resize2d: matrices {rh.shape}, {rw.shape} vs input {x.shape}")
    rh = np.asarray(rh, dtype=x.dtype)
    rw = np.asarray(rw, dtype=x.dtype)
    y = resample_array(x.data, rh, rw)

    def bw(g):
        return (np.ascontiguousarray(resample_array(g, rh.T, rw.T)),)

    return _make(y, (x,), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, scale_: float) -> Tensor:
    """``softmax(q k^T * scale) v`` over ``[..., t, d]`` operands."""
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale_
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    y = p @ vd

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gs *= scale_
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ qd
        return gq, gk, gv

    return _make(y, (q, k, v), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every requiring leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = _acc(loss.grad, np.ones_like(loss.data))
            return
        raise TapeError("loss does not depend on any tensor that requires grad")
    if loss._node.consumed:
        raise TapeError("tape already consumed; run a new forward pass before backward")

    # collect reachable nodes
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        if node.consumed:
            raise TapeError("graph contains a node from a consumed tape")
        seen.add(id(node))
        order.append(t)
        stack.extend(node.parents)
    order.sort(key=lambda t: t._node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        node = t._node
        g = grads.pop(id(t), None)
        if g is not None:
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    p.grad = _acc(p.grad, pg)
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
        node.consumed = True
        node.backward = None


def _acc(prev, g):
    g = np.asarray(g)
    if prev is None:
        return np.array(g, copy=True)
    return prev + g


# ---------------------------------------------------------------------------
# binary dump format
# ---------------------------------------------------------------------------

_MAGIC = b"SERT"
_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(fh: BinaryIO, arr) -> None:
    """Serialize one array: magic, u16 version, u8 dtype, u8 rank, u32 dims, payload (LE)."""
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.float64:
        code = 1
    else:
        raise TypeError(f"SERT supports float32/float64, got {arr.dtype}")
    if arr.ndim > 255:
        raise ShapeError("rank too large for SERT")
    fh.write(_MAGIC)
    fh.write(struct.pack("<HBB", _VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(8)
    if len(head) != 8 or head[:4] != _MAGIC:
        raise ValueError("not a SERT tensor record")
    version, code, rank = struct.unpack("<HBB", head[4:])
    if version != _VERSION:
        raise ValueError(f"unsupported SERT version {version}")
    if code not in _DTYPES:
        raise ValueError(f"unknown SERT dtype code {code}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    buf = fh.read(count * dt.itemsize)
    if len(buf) != count * dt.itemsize:
        raise ValueError("truncated SERT payload")
    return np.frombuffer(buf, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    tot = 0.0
    for p in params:
        if p.grad is not None:
            tot += float((p.grad.astype(np.float64) ** 2).sum())
    return tot ** 0.5
