"""Dense float64 tensors with reverse-mode differentiation.

Every primitive returns a new :class:`Tensor`. When any input requires a
gradient, the output keeps references to its parents plus a closure that maps
the output gradient to parent gradients. :func:`backward` walks those nodes in
reverse topological order, either from an explicit :class:`Tape` or from a
depth-first sort of the graph reachable from the loss.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

COSINE_EPS = 1e-8

_local = threading.local()


class TapeError(RuntimeError):
    pass


class SoftmaxSupportError(ValueError):
    pass


def _active_tapes() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tape:
    """Ordered record of the differentiable operations executed inside a ``with`` block."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        for tape in _active_tapes():
            tape.nodes.append(out)
    return out


# ---------------------------------------------------------------- primitives


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

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting; 1-D operands act as row/column vectors."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd
    out = np.matmul(a2, b2)
    if ad.ndim == 1:
        out = out[..., 0, :]
    if bd.ndim == 1:
        out = out[..., 0]

    def backward(g):
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
            ga = _unbroadcast(ga, a2.shape).reshape(ad.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            gb = _unbroadcast(gb, b2.shape).reshape(bd.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def gather(table, index) -> Tensor:
    """Row lookup: ``out[...] = table[index[...]]`` (embedding lookup)."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, *shape[1:]))
        return (gt,)

    return _make(table.data[index], (table,), backward)


def softmax(v, mask=None, axis: int = -1, allow_empty: bool = False) -> Tensor:
    """Softmax restricted to ``mask``; masked-out positions are exactly zero.

    A slice with no valid position raises :class:`SoftmaxSupportError` unless
    ``allow_empty`` is set, in which case that slice is all zeros.
    """
    v = as_tensor(v)
    x = v.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    support = mask.any(axis=axis, keepdims=True)
    if not allow_empty and not support.all():
        raise SoftmaxSupportError("empty softmax support")
    shifted = np.where(mask, x, -np.inf)
    top = np.max(shifted, axis=axis, keepdims=True)
    top = np.where(support, top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x, 0.0) - top), 0.0)
    z = e.sum(axis=axis, keepdims=True)
    p = e / np.where(support, z, 1.0)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (v,), backward)


def cosine(a, b, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity over the last axis (operands broadcast); each norm is
    floored at ``eps`` so zero vectors score 0."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-1]:
        raise ValueError(f"cosine: length mismatch {ad.shape[-1]} vs {bd.shape[-1]}")
    dot = (ad * bd).sum(axis=-1, keepdims=True)
    na_raw = np.sqrt((ad * ad).sum(axis=-1, keepdims=True))
    nb_raw = np.sqrt((bd * bd).sum(axis=-1, keepdims=True))
    na = np.maximum(na_raw, eps)
    nb = np.maximum(nb_raw, eps)
    c = dot / (na * nb)
    # Clipping only trims rounding noise; values are mathematically inside [-1, 1].
    out = np.clip(c[..., 0], -1.0, 1.0)

    def backward(g):
        g = g[..., None]
        s = g / (na * nb)
        ga = gb = None
        # d cos / d a = b / (|a||b|) - cos * a / |a|^2, the second term only
        # where the norm is not floored. Scalar factors are reduced before
        # they meet the broadcast vectors.
        if a.requires_grad:
            ca = np.where(na_raw > eps, g * c / (na * na), 0.0)
            ga = _unbroadcast(s * bd, ad.shape) - _unbroadcast(ca, ad.shape[:-1] + (1,)) * ad
        if b.requires_grad:
            cb = np.where(nb_raw > eps, g * c / (nb * nb), 0.0)
            gb = _unbroadcast(s * ad, bd.shape) - _unbroadcast(cb, bd.shape[:-1] + (1,)) * bd
        return ga, gb

    return _make(out, (a, b), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    s[~pos] = ez / (1.0 + ez)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped from below and the clamped entries get zero gradient."""
    x = as_tensor(x)
    xd = x.data
    if floor is not None:
        active = ~(xd <= floor)  # NaN stays active so it propagates
        arg = np.where(active, xd, floor)
    else:
        active = None
        arg = xd

    def backward(g):
        gx = g / arg
        if active is not None:
            gx = np.where(active, gx, 0.0)
        return (gx,)

    return _make(np.log(arg), (x,), backward)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ------------------------------------------------------- structural helpers


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take(x, index) -> Tensor:
    """Basic/advanced numpy indexing with scatter-add backward."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), backward)


def expand_dims(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


# ------------------------------------------------------------------ backward


def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: Tape | None = None, seed: float = 1.0) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every trainable leaf.

    Intermediate gradients live only for the duration of the call. Leaf
    gradients are added to whatever is already there.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is not None:
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        if id(loss) not in pos:
            raise TapeError("loss was not recorded on this tape")
        nodes = tape.nodes[: pos[id(loss)] + 1]
    else:
        nodes = [n for n in _topological(loss) if not n.is_leaf]
    grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, float(seed))}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = parent.grad + pg if parent.grad is not None else pg.copy()
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    if loss.is_leaf:
        loss.grad = loss.grad + np.full(loss.shape, float(seed))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``fn`` recomputes the scalar loss from the current values of ``params``.
    ``coords`` limits the check to that many randomly chosen entries per
    parameter (all entries when ``None``).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    zero_grad(params)
    backward(fn())
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = rng.choice(flat.size, size=coords, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + step
            fp = fn().item()
            flat[k] = orig - step
            fm = fn().item()
            flat[k] = orig
            cd = (fp - fm) / (2.0 * step)
            an = ga.reshape(-1)[k]
            err = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
            worst = max(worst, err)
    zero_grad(params)
    return worst
