"""Dense float64 tensors with a reverse-mode tape.

Operations executed inside ``with Tape() as tape:`` are recorded whenever one
of their inputs requires a gradient; outside a tape they simply compute.  The
active tape lives in a ``contextvars.ContextVar`` so each thread (or task)
builds its own.

    with Tape() as tape:
        loss = (x * y).sum()
    backward(loss, tape)
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels

PROB_FLOOR = 1e-12

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "reformulator_tape", default=None
)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents, backward_fn) -> None:
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(out, tuple(parents), backward_fn))


def active_tape() -> Tape | None:
    return _ACTIVE.get()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    tape = _ACTIVE.get()
    out = Tensor(data)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad``.

    Intermediate gradients are reset first, so replaying the same tape twice
    adds the leaf gradients twice (sum semantics) and never compounds.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None or loss.node_id >= len(tape.nodes) or tape.nodes[loss.node_id].out is not loss:
        if loss.requires_grad:  # a leaf used directly as the loss
            loss.grad = loss.grad + 1.0
            return
        raise ValueError("loss is not recorded on this tape")
    for node in tape.nodes:
        node.out.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g_out = node.out.grad
        if g_out is None:
            continue
        grads = node.backward(g_out)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor, floor: float = PROB_FLOOR) -> Tensor:
    """Natural log after clamping the input at ``floor`` (zero gradient where clamped)."""
    xc = np.maximum(x.data, floor)
    live = x.data >= floor
    return _make(np.log(xc), (x,), lambda g: (np.where(live, g / xc, 0.0),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    live = (x.data >= lo_) & (x.data <= hi_)
    return _make(np.clip(x.data, lo_, hi_), (x,), lambda g: (g * live,))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T, (x,), lambda g: (g.T,))


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: np.split(g, cuts, axis=axis),
    )


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def bw(g):
        return [np.take(g, i, axis=axis) for i in range(len(xs))]

    return _make(np.stack([x.data for x in xs], axis=axis), xs, bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bw)


def pick(x: Tensor, index) -> Tensor:
    """Select ``x[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ValueError(f"index shape {index.shape} does not match {x.shape[:-1]}")
    V = x.shape[-1]
    if index.size and (index.min() < 0 or index.max() >= V):
        raise IndexError(f"token index out of range for vocabulary of size {V}")
    picked = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(picked, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and fused ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 3 and bd.ndim == 3:
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bw)


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax received non-finite logits")


def softmax(logits: Tensor) -> Tensor:
    """Max-stabilised softmax over the last axis."""
    _check_finite(logits.data)
    shape = logits.shape
    flat = np.ascontiguousarray(logits.data.reshape(-1, shape[-1]))
    p = _kernels.softmax_rows(flat).reshape(shape)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), bw)


def log_softmax(logits: Tensor) -> Tensor:
    _check_finite(logits.data)
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    y = x - lse
    p = np.exp(y)
    return _make(y, (logits,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def log_prob_gather(dist: Tensor, index) -> Tensor:
    """``log dist[..., index]`` with the probability clamped at PROB_FLOOR."""
    return log(pick(dist, index))


def gru_cell(x: Tensor, h: Tensor, w_x: Tensor, w_h: Tensor, b_x: Tensor, b_h: Tensor) -> Tensor:
    """One fused GRU step for a batch: x [b, d], h [b, H] -> [b, H].

    Weights are laid out as [reset | update | candidate] column blocks:
    w_x [d, 3H], w_h [H, 3H], b_x and b_h [3H].
    """
    xd, hd = x.data, h.data
    gx = xd @ w_x.data + b_x.data
    gh = hd @ w_h.data + b_h.data
    h_new, r, z, n = _kernels.gru_gates_forward(
        np.ascontiguousarray(gx), np.ascontiguousarray(gh), np.ascontiguousarray(hd)
    )

    def bw(g):
        d_gx, d_gh, dh = _kernels.gru_gates_backward(np.ascontiguousarray(g), hd, gh, r, z, n)
        return (
            d_gx @ w_x.data.T,
            dh + d_gh @ w_h.data.T,
            xd.T @ d_gx,
            hd.T @ d_gh,
            d_gx.sum(axis=0),
            d_gh.sum(axis=0),
        )

    return _make(h_new, (x, h, w_x, w_h, b_x, b_h), bw)


# ---------------------------------------------------------------------------
# gradient utilities
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[], object], params: Sequence[Tensor], eps: float = 1e-6) -> list[np.ndarray]:
    """Central differences of ``f()`` with respect to every entry of ``params``.

    ``f`` takes no arguments and reads the parameters' current ``data``; it
    may return a float or a scalar Tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def value() -> float:
        out = f()
        return out.item() if isinstance(out, Tensor) else float(out)

    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def grad_norm(params: Sequence[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None)))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad
