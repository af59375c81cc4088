"""Dense NCHW tensors and a reverse-mode differentiation engine.

Every differentiable operation records a :class:`TapeNode` on its output.
:func:`backward` walks the recorded graph from a scalar loss in reverse
recording order, accumulating gradients into leaf tensors that have
``requires_grad`` set. Intermediate gradients live only for the duration
of the backward pass; the graph is released afterwards.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float32

_GRAD_ENABLED = True
_DEBUG = bool(int(os.environ.get("MSANET_DEBUG", "0")))
_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """Raised when an operation's precondition on its call context fails."""


@dataclass(eq=False)
class TapeNode:
    op_id: str
    input_refs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved_context: dict = field(default_factory=dict)
    order: int = field(default_factory=lambda: next(_counter))


class Tensor:
    """A float array with optional gradient tracking.

    Feature maps are rank-4 ``(N, C, H, W)``; learnable parameters keep their
    natural rank (e.g. a conv weight is ``(Cout, Cin, kh, kw)``).
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=DTYPE):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: TapeNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


# ---------------------------------------------------------------------------
# grad mode / debug switches
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug(flag: bool) -> None:
    """Toggle finiteness assertions on every recorded operation output."""
    global _DEBUG
    _DEBUG = bool(flag)


def set_deterministic(flag: bool = True, num_threads: int | None = None) -> None:
    """Pin the BLAS thread pool so reductions run in a fixed order.

    With a fixed thread count the BLAS kernels partition work identically on
    every call, which makes repeated runs bitwise reproducible. ``num_threads``
    defaults to ``MSANET_NUM_THREADS`` or 1.
    """
    from threadpoolctl import threadpool_limits

    if not flag:
        return
    n = num_threads or int(os.environ.get("MSANET_NUM_THREADS", "1"))
    threadpool_limits(limits=n, user_api="blas")


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op_id: str,
    **saved,
) -> Tensor:
    """Wrap ``data`` as an op output, recording a tape node when needed.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per parent, in order.
    """
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op_id} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = TapeNode(op_id, tuple(parents), backward_fn, saved)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def tensor_new(
    shape: Sequence[int],
    fill: str | float | Sequence[float] = 0.0,
    seed: int = 0,
    low: float = -1.0,
    high: float = 1.0,
    requires_grad: bool = False,
    dtype=DTYPE,
) -> Tensor:
    """Create a tensor from a constant, a seeded uniform draw, or explicit values.

    ``fill`` is a number (constant), the string ``"uniform"`` (draws from
    ``U(low, high)`` with ``seed``), or a flat sequence of values in
    row-major order.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    count = int(np.prod(shape)) if shape else 1
    if isinstance(fill, str):
        if fill != "uniform":
            raise ValueError(f"unknown fill {fill!r}")
        rng = np.random.default_rng(seed)
        data = rng.uniform(low, high, size=shape).astype(dtype)
    elif np.isscalar(fill):
        data = np.full(shape, fill, dtype=dtype)
    else:
        values = np.asarray(fill, dtype=dtype).reshape(-1)
        if values.size != count:
            raise ShapeError(f"{values.size} values given for shape {shape} ({count} elements)")
        data = values.reshape(shape)
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _broadcast_kind(a: tuple, b: tuple) -> str:
    if a == b:
        return "same"
    if len(a) == 4 and len(b) == 4 and b[0] == a[0]:
        if b[1] == a[1] and b[2] == 1 and b[3] == 1:
            return "channel"
        if b[1] == 1 and b[2] == a[2] and b[3] == a[3]:
            return "position"
    raise ShapeError(f"cannot broadcast {b} against {a}")


def _unbroadcast(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "channel":
        return g.sum(axis=(2, 3), keepdims=True)
    if kind == "position":
        return g.sum(axis=1, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data + a.data.dtype.type(c), [a], lambda g: (g,), "add_scalar")
    kind = _broadcast_kind(a.shape, b.shape)
    return make_result(a.data + b.data, [a, b], lambda g: (g, _unbroadcast(g, kind)), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    kind = _broadcast_kind(a.shape, b.shape)
    return make_result(a.data - b.data, [a, b], lambda g: (g, -_unbroadcast(g, kind)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return g * bd, _unbroadcast(g * ad, kind)

    return make_result(ad * bd, [a, b], bw, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)
    return make_result(a.data * f, [a], lambda g: (g * f,), "scale")


def elementwise(a: Tensor, b, kind: str) -> Tensor:
    """Dispatch ``add`` / ``sub`` / ``mul`` / ``scale`` by name."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, _as_tensor(b)) if not np.isscalar(b) else scale(a, b)
    if kind == "scale":
        return scale(a, float(b))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# structural ops and reductions
# ---------------------------------------------------------------------------


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the channel axis, in order."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"cannot concat {p.shape} with {parts[0].shape} along channels")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return make_result(np.concatenate([p.data for p in parts], axis=1), parts, bw, "concat")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel band [{start},{stop}) outside {x.shape[1]} channels")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_result(x.data[:, start:stop].copy(), [x], bw, "channel_slice")


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element as a ``(1, 1, 1, 1)`` scalar tensor."""
    shape = x.shape
    total = x.data.sum(dtype=np.float64).astype(x.data.dtype)
    return make_result(
        np.full((1, 1, 1, 1), total, dtype=x.data.dtype),
        [x],
        lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),),
        "sum",
    )


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.input_refs:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tracked leaf.

    ``loss`` must hold exactly one element with shape ``(1, 1, 1, 1)``.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a (1,1,1,1) scalar loss, got {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.input_refs, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for t in order:
        t._node = None
