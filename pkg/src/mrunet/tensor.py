"""Dense tensors plus a reverse-mode autodiff engine over a dynamic DAG.

Values live in plain numpy arrays (row-major, float32 or float64). A Node
wraps a Tensor together with gradient storage, an op tag and parent links;
ops record the graph as they execute and ``backward`` replays it in reverse
topological order. The graph is rebuilt on every forward pass; only leaf
nodes (parameters, constants) persist across passes.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Iterable

import numpy as np

TRAIN_DTYPE = np.dtype(np.float32)
CHECK_DTYPE = np.dtype(np.float64)

_DTYPE_BY_PRECISION = {"train": TRAIN_DTYPE, "check": CHECK_DTYPE}
_PRECISION_BY_DTYPE = {TRAIN_DTYPE: "train", CHECK_DTYPE: "check"}


class ShapeError(ValueError):
    """A shape or extent constraint was violated."""


class PrecisionError(ValueError):
    """Operands mix 32-bit and 64-bit precision."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


def _as_dtype(precision) -> np.dtype | None:
    if precision is None:
        return None
    if isinstance(precision, str):
        try:
            return _DTYPE_BY_PRECISION[precision]
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in _PRECISION_BY_DTYPE:
        raise ValueError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    """Dense n-dimensional float array.

    Construction validates the two tensor invariants: every extent is at
    least 1, and every element is finite. Any op whose result would violate
    finiteness therefore aborts with NumericError instead of propagating
    NaN/Inf into the graph.
    """

    __slots__ = ("data",)

    def __init__(self, data, precision=None, copy: bool = False):
        dt = _as_dtype(precision)
        if copy:
            arr = np.array(data, dtype=dt)
        else:
            arr = np.asarray(data, dtype=dt)
        if arr.dtype not in _PRECISION_BY_DTYPE:
            arr = arr.astype(CHECK_DTYPE)
        if arr.ndim == 0 or any(e < 1 for e in arr.shape):
            raise ShapeError(f"invalid tensor shape {arr.shape}")
        # Fast finiteness gate: a float64 accumulation of finite float data is
        # finite, and any NaN/Inf element poisons it; only a suspicious sum
        # pays for the exact elementwise check.
        if not np.isfinite(arr.sum(dtype=np.float64)) and not np.isfinite(arr).all():
            raise NumericError("tensor contains NaN or Inf")
        self.data = arr

    @classmethod
    def full(cls, shape, value, precision: str = "check") -> "Tensor":
        shape = _validate_shape(shape)
        return cls(np.full(shape, value, dtype=_as_dtype(precision)))

    @classmethod
    def zeros(cls, shape, precision: str = "check") -> "Tensor":
        return cls.full(shape, 0.0, precision)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return _PRECISION_BY_DTYPE[self.data.dtype]

    def astype(self, precision: str) -> "Tensor":
        return Tensor(self.data.astype(_as_dtype(precision)))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision!r})"


def _validate_shape(shape) -> tuple[int, ...]:
    try:
        extents = tuple(int(e) for e in shape)
    except TypeError:
        raise ShapeError(f"invalid shape {shape!r}") from None
    if len(extents) == 0 or any(e < 1 for e in extents):
        raise ShapeError(f"invalid shape {extents}")
    return extents


def tensor_full(shape, value, precision: str = "check") -> Tensor:
    """A tensor of the given shape with every element equal to ``value``."""
    return Tensor.full(shape, value, precision)


class Node:
    """Autodiff DAG node: a value tensor plus gradient plumbing.

    ``grad`` is None until backward reaches the node. The parent relation is
    acyclic by construction (ops only reference already-built nodes).
    """

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward")

    def __init__(self, value, op: str = "leaf", parents=(), requires_grad: bool = False):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents: tuple[Node, ...] = tuple(parents)
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data, precision=None) -> Node:
    return Node(Tensor(data, precision), op="const")


def parameter(data, precision=None) -> Node:
    return Node(Tensor(data, precision), op="param", requires_grad=True)


def accumulate_grad(parent: Node, g: np.ndarray, owned: bool = False) -> None:
    """Add ``g`` into ``parent.grad``, copying on first assignment.

    The copy keeps gradients of distinct nodes from aliasing each other when
    a backward closure forwards its incoming gradient unchanged. Closures
    that hand over a freshly computed array they will not reuse may pass
    ``owned=True`` to skip the copy.
    """
    if not parent.requires_grad:
        return
    if parent.grad is None:
        if owned and g.dtype == parent.value.dtype:
            parent.grad = g
        else:
            parent.grad = np.array(g, dtype=parent.value.dtype)
    else:
        parent.grad += g


def make_op(out_array: np.ndarray, op: str, parents: tuple[Node, ...],
            backward: Callable[[np.ndarray], None]) -> Node:
    """Wrap an op result, attaching the backward closure when needed."""
    requires = any(p.requires_grad for p in parents)
    node = Node(Tensor(out_array), op=op, parents=parents, requires_grad=requires)
    if requires:
        node._backward = backward
    return node


def _check_binary(a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.value.dtype != b.value.dtype:
        raise PrecisionError(f"precision mismatch {a.value.precision} vs {b.value.precision}")


def add(a: Node, b: Node) -> Node:
    _check_binary(a, b)

    def bk(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return make_op(a.data + b.data, "add", (a, b), bk)


def sub(a: Node, b: Node) -> Node:
    _check_binary(a, b)

    def bk(g):
        accumulate_grad(a, g)
        accumulate_grad(b, -g)

    return make_op(a.data - b.data, "sub", (a, b), bk)


def mul(a: Node, b: Node) -> Node:
    _check_binary(a, b)

    def bk(g):
        accumulate_grad(a, g * b.data, owned=True)
        accumulate_grad(b, g * a.data, owned=True)

    return make_op(a.data * b.data, "mul", (a, b), bk)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Node, b: Node) -> Node:
    """Same-shape elementwise op, one of add/sub/mul."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def concat_channels(a: Node, b: Node) -> Node:
    """Concatenate along the channel axis (the last axis everywhere)."""
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"non-channel axes differ: {a.shape} vs {b.shape}")
    if a.value.dtype != b.value.dtype:
        raise PrecisionError("precision mismatch in concat")
    ca = a.shape[-1]

    def bk(g):
        accumulate_grad(a, g[..., :ca])
        accumulate_grad(b, g[..., ca:])

    return make_op(np.concatenate([a.data, b.data], axis=-1), "concat", (a, b), bk)


def total_sum(a: Node) -> Node:
    """Sum of all elements, as a shape-(1,) scalar node."""
    out = a.data.sum(dtype=a.value.dtype).reshape(1)

    def bk(g):
        accumulate_grad(a, np.full(a.shape, g[0], dtype=a.value.dtype), owned=True)

    return make_op(out, "sum", (a,), bk)


def scale(a: Node, c: float) -> Node:
    """Multiply by a python scalar constant."""
    c = a.value.dtype.type(c)

    def bk(g):
        accumulate_grad(a, g * c, owned=True)

    return make_op(a.data * c, "scale", (a,), bk)


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Reverse-mode sweep from a scalar root.

    Gradients accumulate additively across fan-out. Returns the gradient map
    for every node reachable from the root that requires a gradient.
    """
    if root.value.shape != (1,):
        raise ShapeError(f"backward root must have shape (1,), got {root.value.shape}")
    order = _toposort(root)
    root.grad = np.ones(1, dtype=root.value.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return {n: n.grad for n in order if n.requires_grad and n.grad is not None}


def zero_grads(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.grad = None


# Binary tensor container: magic "TNSR", u32 LE rank, one flag byte (0x20 for
# 32-bit floats, 0x40 for 64-bit), u32 LE extents, then the elements as
# little-endian IEEE floats in row-major order.

TNSR_MAGIC = b"TNSR"
_FLAG_BY_DTYPE = {TRAIN_DTYPE: 0x20, CHECK_DTYPE: 0x40}
_LE_BY_FLAG = {0x20: "<f4", 0x40: "<f8"}


class FormatError(ValueError):
    """Malformed binary container or image header."""


def write_tnsr(dst, t: Tensor) -> None:
    """Write one tensor to a path or a binary file object."""
    if hasattr(dst, "write"):
        _write_tnsr_fp(dst, t)
    else:
        with open(dst, "wb") as fp:
            _write_tnsr_fp(fp, t)


def _write_tnsr_fp(fp: BinaryIO, t: Tensor) -> None:
    rank = len(t.shape)
    fp.write(TNSR_MAGIC)
    fp.write(struct.pack("<I", rank))
    fp.write(bytes([_FLAG_BY_DTYPE[t.dtype]]))
    fp.write(struct.pack(f"<{rank}I", *t.shape))
    fp.write(np.ascontiguousarray(t.data).astype(_LE_BY_FLAG[_FLAG_BY_DTYPE[t.dtype]]).tobytes())


def read_tnsr(src) -> Tensor:
    """Read one tensor from a path or a binary file object."""
    if hasattr(src, "read"):
        return _read_tnsr_fp(src)
    with open(src, "rb") as fp:
        return _read_tnsr_fp(fp)


def _read_tnsr_fp(fp: BinaryIO) -> Tensor:
    magic = fp.read(4)
    if magic != TNSR_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fp, 4))
    flag = _read_exact(fp, 1)[0]
    if flag not in _LE_BY_FLAG:
        raise FormatError(f"bad precision flag 0x{flag:02x}")
    if rank < 1:
        raise FormatError(f"bad rank {rank}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank))
    count = int(np.prod(shape))
    itemsize = 4 if flag == 0x20 else 8
    raw = _read_exact(fp, count * itemsize)
    arr = np.frombuffer(raw, dtype=_LE_BY_FLAG[flag]).reshape(shape)
    return Tensor(arr.astype(TRAIN_DTYPE if flag == 0x20 else CHECK_DTYPE))


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    data = fp.read(n)
    if len(data) != n:
        raise FormatError("truncated tensor file")
    return data
