"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the upstream gradient to
one gradient per parent. ``backward`` orders the recorded nodes
topologically (the tape) and replays them in reverse.
"""
from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 5
TENSOR_MAGIC = b"STCT"

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def record_kinks():
    """Collect the switching pattern (relu masks, max-pool argmaxes) of every op run inside.

    Two evaluations with equal patterns lie in the same smooth piece of the function,
    which is what finite-difference checks need.
    """
    prev = getattr(_state, "kinks", None)
    _state.kinks = []
    try:
        yield _state.kinks
    finally:
        _state.kinks = prev


def note_kink(pattern: np.ndarray) -> None:
    kinks = getattr(_state, "kinks", None)
    if kinks is not None:
        kinks.append(pattern)


def same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_retain", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        if 0 in arr.shape:
            raise ShapeError(f"zero extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._retain = False
        self.op = "leaf"

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep this (non-leaf) tensor's gradient after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    if not np.isfinite(k):
        raise ValueError(f"scale factor must be finite, got {k}")
    return _make(a.data * k, (a,), lambda g: (g * k,), "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; broadcasting limited to numpy's size-1 rules."""
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), grad_fn, "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    note_kink(mask)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array([a.data.sum()]), (a,), lambda g: (np.broadcast_to(g[0], shape).copy(),), "sum")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        axis = tuple(range(a.data.ndim))
    axis = (axis,) if isinstance(axis, int) else tuple(axis)
    count = int(np.prod([shape[i] for i in axis]))
    out = a.data.mean(axis=axis, keepdims=keepdims)
    kept = tuple(1 if i in axis else n for i, n in enumerate(shape))

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(kept) / count, shape).copy(),)

    return _make(out, (a,), grad_fn, "mean")


elementwise_add = add
scalar_scale = scale


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def topological_order(root: Tensor) -> list[Tensor]:
    """Return the recorded nodes reachable from ``root``, parents first."""
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached: no tensor in its graph requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    ``coords`` restricts the check to selected flat indices.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    base = np.array(x.data, dtype=np.float64)
    first = f(Tensor(base.copy())).item()
    if f(Tensor(base.copy())).item() != first:
        raise ValueError("function is not deterministic: two evaluations differ")

    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad

    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        num = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


def encode_tensor(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
    head = TENSOR_MAGIC + struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


class TensorFormatError(ValueError):
    pass


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record at ``offset``; return (array, next offset)."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise TensorFormatError(f"bad tensor magic at byte {offset}")
    offset += 4
    if offset + 1 > len(buf):
        raise TensorFormatError("truncated tensor record (rank)")
    rank = buf[offset]
    offset += 1
    if rank > MAX_RANK:
        raise TensorFormatError(f"tensor rank {rank} exceeds {MAX_RANK}")
    if offset + 4 * rank > len(buf):
        raise TensorFormatError("truncated tensor record (dims)")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    n = int(np.prod(dims, dtype=np.int64))
    if offset + 8 * n > len(buf):
        raise TensorFormatError("truncated tensor record (payload)")
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(dims)
    return arr, offset + 8 * n
