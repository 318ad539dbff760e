"""Reverse-mode automatic differentiation over dense numpy arrays.

The op set is deliberately small: batched matmul, elementwise arithmetic
with suffix broadcasting, fused softmax / layer-norm / GELU primitives with
hand-written backward rules, row gather/scatter, shape ops and reductions.

Broadcasting rule: two shapes are compatible iff one is a trailing suffix
of the other (scalars included). The gradient of the smaller operand sums
over the extra leading axes. Anything richer is rejected so every backward
rule stays auditable.

Gradients accumulate additively on fan-out; nothing is zeroed implicitly.
A graph and its tensors belong to a single thread between forward and
backward; detached tensors are plain data and travel freely.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, DimensionError, NumericError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense array plus an optional gradient and a link into the graph.

    A tensor with ``requires_grad=False`` never accumulates gradient, even
    when it sits on a differentiable path.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents=(), _backward=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={'set' if self.grad is not None else 'none'})"

    # operator sugar; the module-level functions do the work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Topologically ordered record of the graph reachable from a root.

    ``nodes`` lists ancestors in forward topological order (parents before
    consumers); a backward sweep walks it once, in reverse.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        nodes, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            # constants cut the traversal: nothing upstream needs gradient
            for parent in node._parents:
                if id(parent) not in seen and (parent.requires_grad or parent._parents):
                    stack.append((parent, False))
        return cls(nodes)

    def run_backward(self, root: Tensor) -> None:
        root._accumulate(np.ones_like(root.data))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every differentiable tensor reachable from ``loss``.

    ``loss`` must be a scalar already connected to a graph.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    Tape.trace(loss).run_backward(loss)


# ---------------------------------------------------------------------------
# broadcasting helpers


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_suffix(sa: tuple, sb: tuple, op: str) -> None:
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if big[len(big) - len(small):] != small:
        raise DimensionError(f"{op}: shapes {sa} and {sb} are not suffix-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: mixed dtypes {a.dtype.name} and {b.dtype.name}")


def _make(data, parents, backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents),
                  _backward=backward_fn if req else None)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes(a, b, "add")
    _check_suffix(a.shape, b.shape, "add")
    out_data = a.data + b.data

    def _backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), _backward)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes(a, b, "mul")
    _check_suffix(a.shape, b.shape, "mul")
    out_data = a.data * b.data

    def _backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), _backward)


def neg(a: Tensor) -> Tensor:
    def _backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), _backward)


def sub(a: Tensor, b) -> Tensor:
    return add(a, neg(_as_tensor(b, a)))


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch extents broadcast suffix-wise."""
    _check_dtypes(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-d, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    _check_suffix(a.shape[:-2], b.shape[:-2], "matmul batch dims")
    out_data = np.matmul(a.data, b.data)

    def _backward(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        a._accumulate(_unbroadcast(np.matmul(g, bt), a.shape))
        b._accumulate(_unbroadcast(np.matmul(at, g), b.shape))

    return _make(out_data, (a, b), _backward)


# ---------------------------------------------------------------------------
# fused nonlinear primitives


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax: last extent must be >= 1")
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        # dx = y * (g - <g, y>)
        inner = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate(y * (g - inner))

    return _make(y, (x,), _backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last extent ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = centered * inv
    y = gain.data * xhat + bias.data

    def _backward(g):
        lead = tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=lead))
        bias._accumulate(g.sum(axis=lead))
        gx = g * gain.data
        x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(y, (x, gain, bias), _backward)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * np.asarray(_INV_SQRT2, dtype=x.dtype)))
    y = x.data * phi_cdf

    def _backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * np.asarray(_INV_SQRT2PI, dtype=x.dtype)
        x._accumulate(g * (phi_cdf + x.data * pdf))

    return _make(y.astype(x.dtype, copy=False), (x,), _backward)


# ---------------------------------------------------------------------------
# row gather / scatter (second-to-last axis)


def _check_indices(idx: np.ndarray, n: int, op: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"{op}: index list must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{op}: index out of range for extent {n}: {idx[(idx < 0) | (idx >= n)][:4]}")
    return idx


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows along the second-to-last axis; gradient scatters back additively."""
    if x.ndim < 2:
        raise DimensionError(f"gather_rows: operand must be at least 2-d, got {x.shape}")
    idx = _check_indices(idx, x.shape[-2], "gather_rows")
    out_data = x.data[..., idx, :]

    def _backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (Ellipsis, idx, slice(None)), g)
        x._accumulate(gx)

    return _make(out_data, (x,), _backward)


def scatter_rows(x: Tensor, idx, size: int) -> Tensor:
    """Place rows at ``idx`` within a second-to-last axis of extent ``size``.

    Unwritten rows are zero; duplicate indices accumulate additively
    (adjoint of :func:`gather_rows`).
    """
    if x.ndim < 2:
        raise DimensionError(f"scatter_rows: operand must be at least 2-d, got {x.shape}")
    idx = _check_indices(idx, size, "scatter_rows")
    if idx.size != x.shape[-2]:
        raise DimensionError(
            f"scatter_rows: {idx.size} indices for {x.shape[-2]} rows")
    out_data = np.zeros(x.shape[:-2] + (size, x.shape[-1]), dtype=x.dtype)
    np.add.at(out_data, (Ellipsis, idx, slice(None)), x.data)

    def _backward(g):
        x._accumulate(g[..., idx, :])

    return _make(out_data, (x,), _backward)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the second-to-last axis."""
    _check_dtypes(a, b, "concat_rows")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"concat_rows: shapes {a.shape} and {b.shape} disagree off-axis")
    out_data = np.concatenate([a.data, b.data], axis=-2)
    k = a.shape[-2]

    def _backward(g):
        a._accumulate(g[..., :k, :])
        b._accumulate(g[..., k:, :])

    return _make(out_data, (a, b), _backward)


# ---------------------------------------------------------------------------
# shape ops and reductions


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def _backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(out_data, (x,), _backward)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def _backward(g):
        x._accumulate(np.transpose(g, inverse))

    return _make(out_data, (x,), _backward)


def expand_leading(x: Tensor, n: int) -> Tensor:
    """Replicate along a new leading axis; gradient sums over the replicas."""
    out_data = np.broadcast_to(x.data, (n,) + x.shape).copy()

    def _backward(g):
        x._accumulate(g.sum(axis=0))

    return _make(out_data, (x,), _backward)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def _backward(g):
        x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    return _make(out_data, (x,), _backward)


def sum_lastdim(x: Tensor) -> Tensor:
    out_data = x.data.sum(axis=-1)

    def _backward(g):
        x._accumulate(np.repeat(g[..., None], x.shape[-1], axis=-1).astype(x.dtype, copy=False))

    return _make(out_data, (x,), _backward)


def mean_lastdim(x: Tensor) -> Tensor:
    d = x.shape[-1]
    return mul(sum_lastdim(x), 1.0 / d)


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.size)
