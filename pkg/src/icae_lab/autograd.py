"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the handful of operations the transformer needs are provided. Each op
computes its output eagerly with numpy and, when any input requires a
gradient, records a closure that maps the output gradient back onto its
inputs. Gradients are only materialised for tensors with ``requires_grad``;
frozen weights never allocate a ``grad`` array.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class NumericError(ArithmeticError):
    """Non-finite values entered an operation that requires finite input."""


class EmptyLossError(ValueError):
    """Every target position was masked out."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents: Sequence[Tensor], rule) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    live = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    t.requires_grad = live
    if live:
        t._parents = tuple(parents)
        t._backward = rule
    else:
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), rule)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def rule(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _make(out, (x,), rule)


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


# ------------------------------------------------------------------- shaping


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        parts = np.split(g, cuts, axis=axis)
        return tuple(p if x.requires_grad else None for p, x in zip(parts, xs))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, rule)


def take_rows(x: Tensor, rows: Sequence[int] | np.ndarray) -> Tensor:
    """Gather rows ``x[rows]`` (duplicates allowed)."""
    idx = np.asarray(rows, dtype=np.int64)

    def rule(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), rule)


def place_blocks(base: Tensor, blocks: Sequence[tuple[int, Tensor]]) -> Tensor:
    """Return ``base`` with row ranges overwritten by ``blocks``.

    Each block is ``(start_row, Tensor[m, d])``; ranges must not overlap.
    """
    out = base.data.copy()
    covered = np.zeros(base.shape[0], dtype=bool)
    for start, blk in blocks:
        m = blk.shape[0]
        if blk.ndim != 2 or blk.shape[1] != base.shape[1]:
            raise ShapeError(f"block shape {blk.shape} does not fit rows of {base.shape}")
        if start < 0 or start + m > base.shape[0] or covered[start : start + m].any():
            raise ShapeError(f"block at {start} (+{m}) overlaps or overruns {base.shape[0]} rows")
        covered[start : start + m] = True
        out[start : start + m] = blk.data

    def rule(g):
        gb = None
        if base.requires_grad:
            gb = g.copy()
            gb[covered] = 0.0
        rest = tuple(
            g[s : s + b.shape[0]].copy() if b.requires_grad else None for s, b in blocks
        )
        return (gb,) + rest

    return _make(out, (base,) + tuple(b for _, b in blocks), rule)


# ----------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(
        np.array(x.data.sum() / n), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


# -------------------------------------------------------------------- linalg


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes (leading axes broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim == 2 and g.ndim == 2:
                gb = a.data.T @ g
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), rule)


# ------------------------------------------------------------ nn primitives


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable boolean, True = keep) zeroes excluded entries
    exactly; every row must keep at least one entry.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows received non-finite input")
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), rule)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"gain length {gain.shape} does not match last extent {d}")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv
    out = xhat * gain.data

    def rule(g):
        gx = gg = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg

    return _make(out, (x, gain), rule)


def rope_tables(position_ids: np.ndarray, d_head: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    if d_head % 2:
        raise ShapeError(f"rotary embedding needs an even head size, got {d_head}")
    inv_freq = theta ** (-np.arange(0, d_head, 2, dtype=DTYPE) / d_head)
    ang = np.asarray(position_ids, dtype=DTYPE)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def rope_rotate(x: Tensor, position_ids, theta: float = 10000.0, tables=None) -> Tensor:
    """Rotate consecutive pairs of the last axis by ``pos * theta**(-2i/d)``.

    ``x`` is ``[..., T, d_head]``; positions index the ``T`` axis.
    """
    pos = np.asarray(position_ids)
    if x.shape[-2] != pos.shape[0]:
        raise ShapeError(f"{pos.shape[0]} positions for {x.shape[-2]} rows")
    cos, sin = tables if tables is not None else rope_tables(pos, x.shape[-1], theta)
    return _make(_rotate(x.data, cos, sin), (x,), lambda g: (_rotate(g, cos, -sin),))


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked rows."""
    tgt = np.asarray(targets, dtype=np.int64)
    T, V = logits.shape
    if tgt.shape != (T,):
        raise ShapeError(f"{tgt.shape[0]} targets for {T} logit rows")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        raise ValueError(f"target ids must lie in [0, {V})")
    keep = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise EmptyLossError("all target positions are masked")
    rows = np.flatnonzero(keep)
    z = logits.data[rows]
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), tgt[rows]]
    loss = nll.sum() / n

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), tgt[rows]] -= 1.0
        out = np.zeros_like(logits.data)
        out[rows] = p * (g / n)
        return (out,)

    return _make(np.array(loss), (logits,), rule)


# ------------------------------------------------------------------ backward


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``grad`` arrays. The graph is freed
    afterwards, so calling backward twice on one loss is an error.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    for node in order:
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- optimizer


def adamw_step(
    params: Mapping[str, Tensor],
    state: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    step_count: int = 1,
    eps: float = 1e-8,
) -> None:
    """Decoupled-weight-decay Adam update, in place, with bias correction.

    ``state`` maps parameter names to ``(m, v)`` moment arrays and is created
    on first use. ``step_count`` is 1-based.
    """
    b1, b2 = betas
    c1 = 1.0 - b1**step_count
    c2 = 1.0 - b2**step_count
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad
        m, v = state.get(name) or (np.zeros_like(p.data), np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state[name] = (m, v)
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    """Stateful wrapper around :func:`adamw_step`."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, betas=(0.9, 0.999),
                 weight_decay: float = 0.0, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.state: dict = {}
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        self.step_count += 1
        adamw_step(self.params, self.state, self.lr if lr is None else lr, self.betas,
                   self.weight_decay, self.step_count, self.eps)


def checksum(tensors: Mapping[str, Tensor], names: Iterable[str] | None = None) -> str:
    """SHA-256 over names, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors if names is None else names):
        arr = np.ascontiguousarray(tensors[name].data, dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
