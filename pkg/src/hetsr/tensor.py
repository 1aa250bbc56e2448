"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a float32/float64 numpy array plus an optional
gradient and a record of the op that produced it.  Ops are recorded on a
dynamic tape; ``backward()`` replays it in reverse topological order.

Backward formulas are themselves written in terms of tensor ops, so
gradients of gradients work: ``grad(..., create_graph=True)`` returns
graph-connected tensors that can be differentiated again.  This is what
the Wasserstein gradient penalty needs.

Broadcasting follows numpy's right-aligned rule; gradients of broadcast
operands are summed back to the original shape, which keeps backward
unambiguous.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import GraphError, ShapeError

Scalar = Union[int, float]
TensorLike = Union["Tensor", np.ndarray, Scalar, Sequence]

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """Graph record: the op that produced a tensor and its inputs."""

    __slots__ = ("fn", "inputs", "freed")

    def __init__(self, fn: "Function", inputs: tuple):
        self.fn = fn
        self.inputs = inputs
        self.freed = False


class Tensor:
    """N-dimensional float array, optionally carrying a gradient.

    Invariants: ``data`` is a float32 or float64 ndarray; ``grad``, when
    present, has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self.node: Optional[Node] = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _scalar_err(self)

    def numpy(self) -> np.ndarray:
        """The raw array (shared, not copied)."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad_flag})"

    # -- operator sugar -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- autodiff entry point ------------------------------------------------

    def backward(self, create_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must be a scalar; a second backward over the same graph
        (without ``create_graph``) raises :class:`GraphError`.
        """
        if self.size != 1:
            raise GraphError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if self.node is None:
            if not self.requires_grad:
                raise GraphError("backward on a tensor that requires no grad")
            _accumulate_grad(self, Tensor(np.ones_like(self.data)))
            return
        seed = Tensor(np.ones_like(self.data))
        _backprop(self, seed, targets=None, create_graph=create_graph)


def _scalar_err(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(value: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap plain values as constant tensors, adopting ``like``'s dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


# ---------------------------------------------------------------------------
# op machinery
# ---------------------------------------------------------------------------


class Function:
    """A differentiable primitive.

    ``forward`` works on raw arrays.  ``backward`` receives the upstream
    gradient as a *Tensor* and must build its result from tensor ops, so
    that a backward pass can itself be recorded when ``create_graph`` is
    requested.
    """

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> tuple:
        raise NotImplementedError

    def release(self) -> None:
        """Drop saved state after the graph has been consumed."""
        self.__dict__.clear()

    @classmethod
    def apply(cls, *inputs: TensorLike, **kwargs) -> Tensor:
        tensors = []
        anchor = next((v for v in inputs if isinstance(v, Tensor)), None)
        for v in inputs:
            tensors.append(as_tensor(v, like=anchor))
        fn = cls(**kwargs) if kwargs else cls()
        out_data = fn.forward(*[t.data for t in tensors])
        out = Tensor(out_data)
        if _grad_enabled and any(t.requires_grad for t in tensors):
            fn.inputs = tuple(tensors)
            out.requires_grad = True
            out.node = Node(fn, tuple(tensors))
        return out


def _topo_order(root: Tensor) -> list:
    """Tensors with nodes, inputs before consumers (iterative DFS)."""
    order: list = []
    visited: set = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited or t.node is None:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for parent in t.node.inputs:
            if parent.node is not None and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate_grad(leaf: Tensor, g: Tensor) -> None:
    if leaf.grad is None:
        leaf.grad = Tensor(g.data.copy())
    else:
        leaf.grad = Tensor(leaf.grad.data + g.data)


def _backprop(root: Tensor, seed: Tensor, targets, create_graph: bool):
    order = _topo_order(root)
    grads: dict = {id(root): (root, seed)}
    target_ids = {id(t) for t in targets} if targets is not None else set()
    captured: dict = {}

    for t in reversed(order):
        entry = grads.pop(id(t), None)
        if entry is None:
            continue
        g = entry[1]
        if id(t) in target_ids:
            captured[id(t)] = g
        node = t.node
        if node.freed:
            raise GraphError(
                "graph already consumed by a previous backward; run a new forward"
            )
        if create_graph:
            in_grads = node.fn.backward(g)
        else:
            with no_grad():
                in_grads = node.fn.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            if not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            if prev is None:
                grads[id(inp)] = (inp, ig)
            elif create_graph:
                grads[id(inp)] = (inp, add(prev[1], ig))
            else:
                with no_grad():
                    grads[id(inp)] = (inp, add(prev[1], ig))
        if not create_graph:
            node.freed = True
            node.fn.release()

    # whatever is left belongs to leaves (and node-less targets)
    for tid, (t, g) in grads.items():
        if tid in target_ids:
            captured[tid] = g
        elif targets is None and t.requires_grad and t.node is None:
            _accumulate_grad(t, g)

    if targets is not None:
        return [captured.get(id(t)) for t in targets]
    return None


def grad(
    output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False
) -> list:
    """d(output)/d(input) for each input, without touching ``.grad``.

    With ``create_graph=True`` the returned tensors stay connected to the
    graph and can be differentiated again (double backward).
    """
    if output.size != 1:
        raise GraphError(f"grad requires a scalar output, got shape {output.shape}")
    if output.node is None:
        raise GraphError("grad of a tensor with no recorded op")
    seed = Tensor(np.ones_like(output.data))
    return _backprop(output, seed, targets=list(inputs), create_graph=create_graph)


# ---------------------------------------------------------------------------
# broadcasting support
# ---------------------------------------------------------------------------


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes not broadcast-compatible: {sa} vs {sb}")


def _sum_to(t: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if t.shape == shape:
        return t
    lead = t.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, d in enumerate(shape) if d == 1 and t.shape[i + lead] != 1
    )
    out = tensor_sum(t, axis=axes, keepdims=False) if axes else t
    return reshape(out, shape)


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------


class _Add(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape)
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return _sum_to(g, a.shape), _sum_to(g, b.shape)


class _Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape)
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return _sum_to(g, a.shape), _sum_to(neg(g), b.shape)


class _Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape)
        return a * b

    def backward(self, g):
        a, b = self.inputs
        return _sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)


class _Div(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape)
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = div(g, b)
        gb = neg(mul(g, div(a, mul(b, b))))
        return _sum_to(ga, a.shape), _sum_to(gb, b.shape)


class _Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (neg(g),)


class _Pow(Function):
    def __init__(self, exponent: float):
        self.exponent = float(exponent)

    def forward(self, a):
        return a ** self.exponent

    def backward(self, g):
        (a,) = self.inputs
        p = self.exponent
        return (mul(g, mul(power(a, p - 1.0), as_tensor(p, like=a))),)


class _MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(
                f"matmul needs >=2-D operands, got {a.shape} and {b.shape}"
            )
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
        _check_broadcast(a.shape[:-2], b.shape[:-2])
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.inputs
        ga = matmul(g, _swap_last(b))
        gb = matmul(_swap_last(a), g)
        return _sum_to(ga, a.shape), _sum_to(gb, b.shape)


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class _Sum(Function):
    def __init__(self, axis=None, keepdims=False, in_shape=None):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        self.in_shape = a.shape
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g):
        shape = self.in_shape
        if self.axis is not None and not self.keepdims:
            kept = list(shape)
            for ax in self.axis:
                kept[ax] = 1
            g = reshape(g, tuple(kept))
        elif self.axis is None and not self.keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)


class _BroadcastTo(Function):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        self.in_shape = a.shape
        _check_broadcast(a.shape, self.shape)
        return np.ascontiguousarray(np.broadcast_to(a, self.shape))

    def backward(self, g):
        return (_sum_to(g, self.in_shape),)


class _Reshape(Function):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        self.in_shape = a.shape
        return np.reshape(a, self.shape)

    def backward(self, g):
        return (reshape(g, self.in_shape),)


class _Transpose(Function):
    def __init__(self, axes=None):
        self.axes = axes

    def forward(self, a):
        self.ndim = a.ndim
        return np.transpose(a, self.axes)

    def backward(self, g):
        if self.axes is None:
            return (transpose(g, None),)
        inverse = tuple(np.argsort(self.axes))
        return (transpose(g, inverse),)


class _Concat(Function):
    def __init__(self, axis=0):
        self.axis = axis

    def forward(self, *arrays):
        self.sizes = [a.shape[self.axis] for a in arrays]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g):
        grads = []
        start = 0
        for i, span in enumerate(self.sizes):
            sl = [slice(None)] * g.ndim
            sl[self.axis] = slice(start, start + span)
            grads.append(slice_(g, tuple(sl)))
            start += span
        return tuple(grads)


class _Slice(Function):
    def __init__(self, slices):
        self.slices = slices

    def forward(self, a):
        self.in_shape = a.shape
        return a[self.slices].copy()

    def backward(self, g):
        return (embed_slice(g, self.slices, self.in_shape),)


class _EmbedSlice(Function):
    """Adjoint of slicing: write into a zero tensor at the given region."""

    def __init__(self, slices, shape):
        self.slices = slices
        self.shape = tuple(shape)

    def forward(self, a):
        out = np.zeros(self.shape, dtype=a.dtype)
        out[self.slices] = a
        return out

    def backward(self, g):
        return (slice_(g, self.slices),)


class _Where(Function):
    """Select by a constant boolean mask (no gradient through the mask)."""

    def __init__(self, cond: np.ndarray):
        self.cond = cond

    def forward(self, a, b):
        return np.where(self.cond, a, b)

    def backward(self, g):
        a, b = self.inputs
        mask = Tensor(self.cond.astype(g.data.dtype))
        ga = mul(g, mask)
        gb = mul(g, Tensor(1.0 - mask.data))
        return _sum_to(ga, a.shape), _sum_to(gb, b.shape)


class _LeakyReLU(Function):
    """max(x, slope*x); subgradient at 0 takes the positive branch (1)."""

    def __init__(self, slope: float):
        self.slope = float(slope)

    def forward(self, a):
        self.scale = np.where(a >= 0, 1.0, self.slope).astype(a.dtype)
        return a * self.scale

    def backward(self, g):
        return (mul(g, Tensor(self.scale)),)


# ---------------------------------------------------------------------------
# gather / scatter: the shared linear-index primitives
# ---------------------------------------------------------------------------
#
# Both treat the tensor as (B, rest): the same flat index map is applied to
# every leading-row. They are exact adjoints of each other, which makes any
# op built from them (padding, im2col, pixel shuffle, channel selection)
# automatically double-differentiable.


class _GatherRows(Function):
    def __init__(self, index: np.ndarray, out_tail: tuple):
        self.index = index
        self.out_tail = tuple(out_tail)

    def forward(self, a):
        b = a.shape[0]
        self.in_tail = a.shape[1:]
        flat = a.reshape(b, -1)
        return np.take(flat, self.index, axis=1).reshape((b,) + self.out_tail)

    def backward(self, g):
        return (scatter_rows(g, self.index, self.in_tail),)


class _ScatterRows(Function):
    def __init__(self, index: np.ndarray, out_tail: tuple):
        self.index = index
        self.out_tail = tuple(out_tail)

    def forward(self, a):
        b = a.shape[0]
        self.in_tail = a.shape[1:]
        flat = a.reshape(b, -1)
        tail_size = int(np.prod(self.out_tail)) if self.out_tail else 1
        # bincount is a fast, deterministic scatter-add
        offsets = (np.arange(b, dtype=np.int64) * tail_size)[:, None]
        full_index = (self.index[None, :] + offsets).reshape(-1)
        out = np.bincount(
            full_index, weights=flat.reshape(-1).astype(np.float64),
            minlength=b * tail_size,
        )
        return out.reshape((b,) + self.out_tail).astype(a.dtype, copy=False)

    def backward(self, g):
        return (gather_rows(g, self.index, self.in_tail),)


# ---------------------------------------------------------------------------
# public op functions
# ---------------------------------------------------------------------------


def add(a: TensorLike, b: TensorLike) -> Tensor:
    return _Add.apply(a, b)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    return _Sub.apply(a, b)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    return _Mul.apply(a, b)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    return _Div.apply(a, b)


def neg(a: TensorLike) -> Tensor:
    return _Neg.apply(a)


def power(a: TensorLike, exponent: float) -> Tensor:
    return _Pow.apply(a, exponent=exponent)


def sqrt(a: TensorLike) -> Tensor:
    return power(a, 0.5)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    return _MatMul.apply(a, b)


def tensor_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _Sum.apply(a, axis=_normalize_axis(axis, a.ndim), keepdims=keepdims)


def tensor_mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    norm_axis = _normalize_axis(axis, a.ndim)
    if norm_axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[ax] for ax in norm_axis]))
    total = tensor_sum(a, axis=norm_axis, keepdims=keepdims)
    return div(total, as_tensor(float(count), like=a))


# spec-facing aliases; `tensor_sum`/`tensor_mean` avoid shadowing builtins
# in this module's own code.
sum = tensor_sum  # noqa: A001
mean = tensor_mean


def broadcast_to(a: TensorLike, shape) -> Tensor:
    return _BroadcastTo.apply(a, shape=tuple(shape))


def reshape(a: TensorLike, shape) -> Tensor:
    return _Reshape.apply(a, shape=tuple(shape))


def transpose(a: TensorLike, axes=None) -> Tensor:
    return _Transpose.apply(a, axes=axes)


def concat(tensors: Iterable[TensorLike], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    return _Concat.apply(*tensors, axis=axis)


def slice_(a: TensorLike, slices) -> Tensor:
    return _Slice.apply(a, slices=slices)


def embed_slice(a: TensorLike, slices, shape) -> Tensor:
    return _EmbedSlice.apply(a, slices=slices, shape=shape)


def where(cond: np.ndarray, a: TensorLike, b: TensorLike) -> Tensor:
    return _Where.apply(a, b, cond=np.asarray(cond, dtype=bool))


def leaky_relu(a: TensorLike, slope: float = 0.01) -> Tensor:
    return _LeakyReLU.apply(a, slope=slope)


def relu(a: TensorLike) -> Tensor:
    return leaky_relu(a, 0.0)


def prelu(a: TensorLike, slope: Tensor) -> Tensor:
    """PReLU with a learnable scalar slope: relu(x) + slope * min(x, 0)."""
    pos = relu(a)
    return add(pos, mul(slope, sub(a, pos)))


def gather_rows(a: TensorLike, index: np.ndarray, out_tail: tuple) -> Tensor:
    """Per-row gather: ``out[b].flat[k] = a[b].flat[index[k]]``."""
    return _GatherRows.apply(a, index=index, out_tail=tuple(out_tail))


def scatter_rows(a: TensorLike, index: np.ndarray, out_tail: tuple) -> Tensor:
    """Adjoint of :func:`gather_rows` (per-row scatter-add into zeros)."""
    return _ScatterRows.apply(a, index=index, out_tail=tuple(out_tail))


def stack_arrays(arrays: Sequence[np.ndarray], dtype=None) -> Tensor:
    """Stack raw arrays into a constant batch tensor (no graph)."""
    return Tensor(np.stack([np.asarray(a, dtype=dtype) for a in arrays]))
