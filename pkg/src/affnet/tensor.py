"""Dense tensors with reverse-mode automatic differentiation.

Every primitive builds its output through :func:`make_node`, which attaches a
backward closure only when gradients are enabled and some parent requires
them.  Arrays are row-major numpy arrays; 64-bit is the default dtype and
32-bit is used for training throughput.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, GeometryError

_grad_enabled = True
# grad_check installs a list here to observe max-pool argmax choices
# set by gradcheck: records max-pool argmaxes and ReLU masks, so a
# finite-difference probe can tell when it stepped across a kink
_branch_trace: list | None = None


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus an optional gradient buffer and graph links."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.array(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_non_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_non_scalar(t):
    raise ContractError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap ``data`` as the output of primitive ``op``.

    ``backward_fn(grad)`` must push gradient into the parents via
    :func:`accumulate`.  It is dropped when no parent needs a gradient.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


class ComputationRecord:
    """Topologically ordered list of the op nodes that produced an output."""

    def __init__(self, output: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        self.output = output
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @property
    def ops(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is not None]


def backward(output: Tensor, record: ComputationRecord | None = None, leaves: Sequence[Tensor] = ()):
    """Populate ``.grad`` on every tensor that requires it.

    Tensors listed in ``leaves`` that the output does not depend on receive
    an explicit zero gradient.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a single-element output, got shape {output.shape}")
    if record is None:
        record = ComputationRecord(output)
    output.grad = np.ones_like(output.data)
    for node in reversed(record.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# elementwise -----------------------------------------------------------------

def _binary_check(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape:
        raise ContractError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check(a, b, "add")

    def bw(g):
        accumulate(a, g)
        accumulate(b, g)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check(a, b, "sub")

    def bw(g):
        accumulate(a, g)
        accumulate(b, -g)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def bw_const(g):
            accumulate(a, g * c)

        return make_node(a.data * a.data.dtype.type(c), (a,), bw_const, "mul_const")
    _binary_check(a, b, "mul")

    def bw(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def tsum(x: Tensor) -> Tensor:
    def bw(g):
        accumulate(x, np.full_like(x.data, g.reshape(-1)[0]))

    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        accumulate(x, np.full_like(x.data, g.reshape(-1)[0] / n))

    return make_node(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape

    def bw(g):
        accumulate(x, g.reshape(src))

    return make_node(x.data.reshape(shape), (x,), bw, "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _branch_trace is not None:
        _branch_trace.append(mask)

    def bw(g):
        accumulate(x, g * mask)

    return make_node(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), bw, "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data > 0
    if _branch_trace is not None:
        _branch_trace.append(mask)
    s = x.dtype.type(slope)

    def bw(g):
        accumulate(x, np.where(mask, g, g * s))

    return make_node(np.where(mask, x.data, x.data * s), (x,), bw, "leaky_relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bw(g):
        accumulate(x, g * s * (1 - s))

    return make_node(s, (x,), bw, "sigmoid")


def apply_activation(x: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


# dense -----------------------------------------------------------------------

def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, D_in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ContractError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ContractError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if x.requires_grad:
            accumulate(x, g @ weight.data)
        if weight.requires_grad:
            accumulate(weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            accumulate(bias, g.sum(axis=0))

    return make_node(out, parents, bw, "affine")


# spatial ---------------------------------------------------------------------

def conv_out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding via im2col + GEMM."""
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), weight, bias, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d: expected NCHW input and OIkk weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    co, ci, k, k2 = weight.shape
    if ci != c:
        raise ContractError(f"conv2d: input has {c} channels, weight expects {ci}")
    if k != k2:
        raise ContractError("conv2d: only square kernels are supported")
    if stride < 1 or padding < 0:
        raise GeometryError(f"conv2d: bad stride/padding ({stride}, {padding})")
    if bias is not None and bias.shape != (co,):
        raise ContractError(f"conv2d: bias {bias.shape} does not match {co} output channels")
    ho, wo = conv_out_extent(h, k, stride, padding), conv_out_extent(w, k, stride, padding)
    if k > h + 2 * padding or k > w + 2 * padding or ho <= 0 or wo <= 0:
        raise GeometryError(f"conv2d: kernel {k} does not fit {h}x{w} with padding {padding}")
    xd = np.ascontiguousarray(x.data)
    wd = weight.data.astype(xd.dtype, copy=False)
    cols = kernels.im2col(xd, k, stride, padding, ho, wo)  # (N, P, C*k*k)
    w2 = wd.reshape(co, -1)
    out = np.matmul(cols, w2.T)
    if bias is not None:
        out += bias.data.astype(xd.dtype, copy=False)
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, co, ho, wo)
    keep_cols = cols if weight.requires_grad and _grad_enabled else None
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(n, co, ho * wo)
        if weight.requires_grad:
            g_rows = np.ascontiguousarray(g2.transpose(1, 0, 2)).reshape(co, n * ho * wo)
            dw = g_rows @ keep_cols.reshape(n * ho * wo, -1)
            accumulate(weight, dw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            accumulate(bias, g2.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.ascontiguousarray(g2.transpose(0, 2, 1)) @ w2
            accumulate(x, kernels.col2im(dcols, c, h, w, k, stride, padding, ho, wo))

    return make_node(out, parents, bw, "conv2d")


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2) -> Tensor:
    """Max pooling without padding; ties route gradient to the first row-major max."""
    if x.ndim == 3:
        out = maxpool2d(reshape(x, (1,) + x.shape), kernel, stride)
        return reshape(out, out.shape[1:])
    n, c, h, w = x.shape
    if kernel > h or kernel > w or stride < 1:
        raise GeometryError(f"maxpool2d: window {kernel} does not fit {h}x{w}")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(x.data), kernel, stride, ho, wo)
    if _branch_trace is not None:
        _branch_trace.append(arg)

    def bw(g):
        accumulate(x, kernels.maxpool_backward(np.ascontiguousarray(g), arg, h, w))

    return make_node(out, (x,), bw, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim == 3:
        out = global_avg_pool(reshape(x, (1,) + x.shape))
        return reshape(out, out.shape[1:])
    n, c, h, w = x.shape
    area = h * w

    def bw(g):
        accumulate(x, np.broadcast_to((g / area)[:, :, None, None], x.shape).copy())

    return make_node(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; every other extent must agree."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat of an empty list")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(p.shape, ref)) if i != axis):
            raise GeometryError(f"concat: extents {p.shape} do not match {ref} outside axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                accumulate(p, np.ascontiguousarray(g[tuple(idx)]))

    return make_node(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def channel_concat(parts: Sequence[Tensor]) -> Tensor:
    if parts and parts[0].ndim == 3:
        return concat(parts, axis=0)
    return concat(parts, axis=1)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        accumulate(x, full)

    return make_node(np.ascontiguousarray(x.data[idx]), (x,), bw, "slice")


def scale_channels(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply each (sample, channel) map of ``x`` by ``scale[n, c]``."""
    if scale.shape != x.shape[:2]:
        raise ContractError(f"scale_channels: scale {scale.shape} does not match {x.shape[:2]}")
    s = scale.data[:, :, None, None]

    def bw(g):
        if x.requires_grad:
            accumulate(x, g * s)
        if scale.requires_grad:
            accumulate(scale, (g * x.data).sum(axis=(2, 3)))

    return make_node(x.data * s, (x, scale), bw, "scale_channels")


def shift_channels(x: Tensor, shift: Tensor) -> Tensor:
    if shift.shape != x.shape[:2]:
        raise ContractError(f"shift_channels: shift {shift.shape} does not match {x.shape[:2]}")

    def bw(g):
        accumulate(x, g)
        accumulate(shift, g.sum(axis=(2, 3)))

    return make_node(x.data + shift.data[:, :, None, None], (x, shift), bw, "shift_channels")
