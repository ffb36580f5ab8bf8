"""Dense tensors with reverse-mode differentiation.

A Tensor wraps a numpy array plus an optional backward closure linking it
to its parents. Creation order doubles as a topological order (an op's
output always has a larger id than its inputs), so reverse-mode traversal
is simply "visit reachable nodes by descending id". Tensors are immutable
by convention after creation; training code only mutates leaf `.data`
buffers between steps.

Two float precisions are supported: float32 for training and float64 for
gradient verification. Mixed-dtype arithmetic is an error rather than a
silent upcast.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError

_ids = itertools.count()
_grad_enabled = True

FLOAT_DTYPES = (np.float32, np.float64)


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _coerce(data, dtype) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype in FLOAT_DTYPES:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float32)


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "requires_grad", "id", "parents", "bwd", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        parents: Sequence["Tensor"] = (),
        bwd: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
    ):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.parents = tuple(parents)
        self.bwd = bwd
        self.op = op

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype})"

    # -- graph construction helper ----------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], bwd_factory, op: str) -> "Tensor":
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        return Tensor(
            data,
            requires_grad=needs,
            parents=parents if needs else (),
            bwd=bwd_factory() if needs else None,
            op=op,
        )

    # -- elementwise arithmetic --------------------------------------------

    def _binary_prep(self, other, opname: str) -> "Tensor":
        if not isinstance(other, Tensor):
            other = Tensor(np.asarray(other, dtype=self.data.dtype))
        if other.data.dtype != self.data.dtype:
            raise DimensionError(
                f"{opname}: dtype mismatch {self.data.dtype} vs {other.data.dtype}"
            )
        return other

    def __add__(self, other) -> "Tensor":
        other = self._binary_prep(other, "add")
        a, b = self, other
        out = a.data + b.data

        def factory():
            def bwd(g):
                return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

            return bwd

        return Tensor._make(out, (a, b), factory, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def factory():
            return lambda g: (-g,)

        return Tensor._make(-a.data, (a,), factory, "neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-self._binary_prep(other, "sub"))

    def __rsub__(self, other) -> "Tensor":
        return (-self) + other

    def __mul__(self, other) -> "Tensor":
        other = self._binary_prep(other, "mul")
        a, b = self, other
        out = a.data * b.data

        def factory():
            def bwd(g):
                ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
                gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
                return ga, gb

            return bwd

        return Tensor._make(out, (a, b), factory, "mul")

    __rmul__ = __mul__

    def __truediv__(self, scalar) -> "Tensor":
        if isinstance(scalar, Tensor):
            raise ContractError("tensor/tensor division unsupported; multiply by a constant")
        return self * (1.0 / float(scalar))

    # -- matmul -------------------------------------------------------------

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out = a.data.reshape(shape)
        old = a.shape

        def factory():
            return lambda g: (g.reshape(old),)

        return Tensor._make(out, (a,), factory, "reshape")

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        a = self
        out = np.swapaxes(a.data, ax1, ax2)

        def factory():
            return lambda g: (np.swapaxes(g, ax1, ax2),)

        return Tensor._make(out, (a,), factory, "swapaxes")

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        a = self
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = np.transpose(a.data, axes)

        def factory():
            return lambda g: (np.transpose(g, inv),)

        return Tensor._make(out, (a,), factory, "transpose")

    def __getitem__(self, idx) -> "Tensor":
        a = self
        out = a.data[idx]
        shape, dtype = a.shape, a.data.dtype

        def factory():
            def bwd(g):
                buf = np.zeros(shape, dtype=dtype)
                buf[idx] = g
                return (buf,)

            return bwd

        return Tensor._make(out, (a,), factory, "getitem")

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)
        shape = a.shape

        def factory():
            def bwd(g):
                gg = np.asarray(g)
                if not keepdims and axis is not None:
                    gg = np.expand_dims(gg, axis)
                return (np.broadcast_to(gg, shape).copy(),)

            return bwd

        return Tensor._make(out, (a,), factory, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def abs(self) -> "Tensor":
        a = self
        out = np.abs(a.data)
        # subgradient at 0 is 0: np.sign(0) == 0
        sign = np.sign(a.data)

        def factory():
            return lambda g: (g * sign,)

        return Tensor._make(out, (a,), factory, "abs")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if squash:
        g = g.sum(axis=squash, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with broadcasting over leading batch dimensions."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError("matmul expects Tensor operands")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"matmul: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def factory():
        def bwd(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            if b.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    # stacked @ weight: collapse the batch dims into one gemm
                    k, n = b.shape
                    gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                else:
                    gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            return ga, gb

        return bwd

    return Tensor._make(out, (a, b), factory, "matmul")


class ComputationRecord:
    """The nodes reachable from an output, in append (topological) order."""

    def __init__(self, nodes: list[Tensor], parameters: set[Tensor]):
        self.nodes = nodes
        self.parameters = parameters

    @staticmethod
    def trace(output: Tensor) -> "ComputationRecord":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        params: set[Tensor] = set()
        stack = [output]
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen.add(node.id)
            nodes.append(node)
            if node.requires_grad and not node.parents:
                params.add(node)
            stack.extend(p for p in node.parents if p.requires_grad)
        nodes.sort(key=lambda n: n.id)
        return ComputationRecord(nodes, params)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar loss.

    Returns a map from parameter tensor to gradient array. Parameters
    passed explicitly but unreachable from the loss get zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    record = ComputationRecord.trace(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        if node.bwd is None:
            continue
        g = grads.pop(node.id, None)
        if g is None:
            continue
        parent_grads = node.bwd(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"backward of {node.op}: grad shape {pg.shape} != input shape {parent.shape}"
                )
            have = grads.get(parent.id)
            grads[parent.id] = pg if have is None else have + pg
    if params is None:
        params = record.parameters
    out: dict[Tensor, np.ndarray] = {}
    for p in params:
        out[p] = grads.get(p.id, np.zeros_like(p.data))
    return out


def tensor(data, dtype=None) -> Tensor:
    """A constant (non-trainable) tensor."""
    return Tensor(data, dtype=dtype)


def param(data, dtype=None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))
