"""Dense float64 tensors with reverse-mode automatic differentiation.

A small, eager, single-threaded engine: each operation computes its result
immediately and records its inputs plus a backward rule on the result node.
``DiffTensor.backward`` materializes the recorded graph as a ``Tape``
(topological order, inputs before consumers) and replays it in reverse,
visiting every node exactly once.

All arrays are row-major float64. Every operation checks that its output is
finite and raises ``NonFiniteError`` instead of letting NaN or Inf propagate,
so a finite graph stays finite until something genuinely overflows.

There is no shared global state: a graph belongs to whichever thread built
it, and independent graphs over shared read-only leaves may run concurrently.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced (or was given) NaN or infinite values."""


class DegenerateRowError(ValueError):
    """A weighted softmax row has no positive weight to normalize over."""


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _require_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: result contains NaN or Inf")


class DiffTensor:
    """N-dimensional float64 array participating in a reverse-mode graph.

    Leaves are built directly (``constant`` / ``parameter``); interior nodes
    are built by the operations below and carry references to their inputs
    and a backward rule. ``grad`` is populated on leaves with
    ``requires_grad=True`` after ``backward()`` and accumulates across calls
    until ``zero_grad()``.
    """

    def __init__(self, values, requires_grad: bool = False):
        data = np.ascontiguousarray(values, dtype=np.float64)
        _require_finite(data, "tensor")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[DiffTensor, ...] = ()
        self._backward = None
        self._op = "leaf"

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
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.ravel()

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of this node into all reachable leaves.

        Without ``seed`` the node must be a scalar and is seeded with 1.
        """
        if not self.requires_grad:
            return
        if seed is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed requires a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ShapeError("seed gradient shape must match tensor shape")
        Tape(self).run_backward(self, seed)

    # Operator sugar; all dispatch to the module-level operations.
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_tensor(self, idx)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffTensor(shape={self.data.shape}, op={self._op!r}{flag})"


class Tape:
    """Topologically ordered record of the operations reachable from a root.

    Only gradient-relevant nodes are recorded (constants are pruned). The
    order guarantees every operation's inputs precede it, so the reverse
    sweep in ``run_backward`` visits each node exactly once with its output
    gradient fully accumulated.
    """

    def __init__(self, root: DiffTensor):
        nodes: list[DiffTensor] = []
        visited = {id(root)}
        stack = [(root, iter(root._parents))]
        while stack:
            node, parents = stack[-1]
            child = next(parents, None)
            if child is None:
                nodes.append(node)
                stack.pop()
            elif id(child) not in visited:
                visited.add(id(child))
                stack.append((child, iter(child._parents)))
        self.nodes = nodes

    def run_backward(self, root: DiffTensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def constant(values) -> DiffTensor:
    """Leaf tensor excluded from gradient computation."""
    return values if isinstance(values, DiffTensor) else DiffTensor(values)


def parameter(values) -> DiffTensor:
    """Leaf tensor that receives gradients."""
    return DiffTensor(values, requires_grad=True)


def _wrap(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward, op: str) -> DiffTensor:
    data = np.ascontiguousarray(data, dtype=np.float64)
    _require_finite(data, op)
    out = DiffTensor.__new__(DiffTensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = tuple(p for p in parents if p.requires_grad)
    out._backward = backward if out.requires_grad else None
    out._op = op
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a_shape, b_shape, op: str) -> None:
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} do not broadcast") from None


def add(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape, "add")

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _sum_to_shape(g, a.shape)))
        if b.requires_grad:
            out.append((b, _sum_to_shape(g, b.shape)))
        return out

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape, "sub")

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _sum_to_shape(g, a.shape)))
        if b.requires_grad:
            out.append((b, _sum_to_shape(-g, b.shape)))
        return out

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> DiffTensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape, "mul")

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _sum_to_shape(g * b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _sum_to_shape(g * a.data, b.shape)))
        return out

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a, c: float) -> DiffTensor:
    a = _wrap(a)
    c = float(c)

    def backward(g):
        return [(a, g * c)]

    return _make(a.data * c, (a,), backward, "scale")


def matmul(a, b) -> DiffTensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul")

    def backward(g):
        out = []
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            out.append((a, _sum_to_shape(ga, a.shape)))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            out.append((b, _sum_to_shape(gb, b.shape)))
        return out

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def transpose_last(a) -> DiffTensor:
    """Swap the last two axes."""
    a = _wrap(a)
    if a.ndim < 2:
        raise ShapeError("transpose_last: operand must have at least 2 dimensions")

    def backward(g):
        return [(a, np.swapaxes(g, -1, -2))]

    return _make(np.swapaxes(a.data, -1, -2), (a,), backward, "transpose_last")


def swap_axes(a, axis1: int, axis2: int) -> DiffTensor:
    a = _wrap(a)

    def backward(g):
        return [(a, np.swapaxes(g, axis1, axis2))]

    return _make(np.swapaxes(a.data, axis1, axis2), (a,), backward, "swap_axes")


def reshape(a, shape) -> DiffTensor:
    """Row-major reshape; total element count is preserved."""
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}")

    def backward(g):
        return [(a, g.reshape(a.shape))]

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def broadcast_to(a, shape) -> DiffTensor:
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    _check_broadcast(a.shape, shape, "broadcast_to")

    def backward(g):
        return [(a, _sum_to_shape(g, a.shape))]

    return _make(np.broadcast_to(a.data, shape), (a,), backward, "broadcast_to")


def slice_tensor(a, idx) -> DiffTensor:
    """Basic indexing (ints, slices, Ellipsis); gradient scatters back."""
    a = _wrap(a)
    try:
        view = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: invalid index for shape {a.shape}: {exc}") from None

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return [(a, full)]

    return _make(view, (a,), backward, "slice")


def concat(tensors, axis: int = -1) -> DiffTensor:
    """Concatenate along ``axis``; all other dimensions must match."""
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    ax = axis if axis >= 0 else data.ndim + axis
    widths = [t.shape[ax] for t in ts]

    def backward(g):
        out = []
        offset = 0
        index = [slice(None)] * g.ndim
        for t, w in zip(ts, widths):
            if t.requires_grad:
                index[ax] = slice(offset, offset + w)
                out.append((t, g[tuple(index)]))
            offset += w
        return out

    return _make(data, ts, backward, "concat")


def reduce_sum(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            full = np.broadcast_to(g.reshape((1,) * a.ndim), a.shape)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g_exp = g if keepdims else np.expand_dims(g, axes)
            full = np.broadcast_to(g_exp, a.shape)
        return [(a, np.ascontiguousarray(full))]

    return _make(data, (a,), backward, "reduce_sum")


def gelu(x) -> DiffTensor:
    """Exact Gaussian-error-linear unit, x * Phi(x) with the erf form.

    Uses the exact Gaussian CDF rather than the tanh approximation, so the
    analytic derivative Phi(x) + x * phi(x) matches finite differences to
    full float64 precision.
    """
    x = _wrap(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return [(x, g * (cdf + x.data * pdf))]

    return _make(x.data * cdf, (x,), backward, "gelu")


def huber(x) -> DiffTensor:
    """Elementwise smooth-L1 kernel: 0.5 x^2 inside |x| < 1, |x| - 0.5 beyond."""
    x = _wrap(x)
    a = np.abs(x.data)
    data = np.where(a < 1.0, 0.5 * x.data * x.data, a - 0.5)

    def backward(g):
        return [(x, g * np.clip(x.data, -1.0, 1.0))]

    return _make(data, (x,), backward, "huber")


def masked_softmax(scores, weights: np.ndarray) -> DiffTensor:
    """Row-normalized exp(scores) * weights over the last axis.

    ``weights`` is a constant array with entries in [0, 1]; its last two
    axes must match the score rows and any leading axes broadcast against
    the scores. Every weight row must carry positive total weight; entries
    that are exactly 0 force the corresponding outputs to exactly 0. The
    per-row maximum of the scores is subtracted before exponentiation,
    which leaves the result unchanged mathematically but keeps the
    exponentials bounded.
    """
    scores = _wrap(scores)
    weights = np.asarray(weights, dtype=np.float64)
    if scores.ndim < 2 or weights.ndim < 2:
        raise ShapeError("masked_softmax: scores and weights must have >= 2 dimensions")
    if weights.shape[-2:] != scores.shape[-2:]:
        raise ShapeError(
            f"masked_softmax: weights rows {weights.shape[-2:]} do not match "
            f"score rows {scores.shape[-2:]}"
        )
    try:
        if np.broadcast_shapes(weights.shape, scores.shape) != scores.shape:
            raise ValueError
    except ValueError:
        raise ShapeError(
            f"masked_softmax: weights shape {weights.shape} does not broadcast "
            f"to scores shape {scores.shape}"
        ) from None
    if np.any(weights < 0.0) or np.any(weights > 1.0):
        raise ValueError("masked_softmax: weights must lie in [0, 1]")
    row_sums = weights.reshape(-1, weights.shape[-1]).sum(axis=-1)
    if np.any(row_sums <= 0.0):
        bad = int(np.argmax(row_sums <= 0.0))
        raise DegenerateRowError(f"masked_softmax: weight row {bad} sums to zero")

    shifted = scores.data - scores.data.max(axis=-1, keepdims=True)
    weighted = np.exp(shifted) * weights
    out_data = weighted / weighted.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        return [(scores, out_data * (g - inner))]

    return _make(out_data, (scores,), backward, "masked_softmax")


def bank_apply(bank, x) -> DiffTensor:
    """Per-row matrix bank product: out[..., n, :] = bank[n] @ x[..., n, :].

    ``bank`` has shape (N, H, D) and ``x`` has shape (..., N, D); the result
    is (..., N, H). Semantically identical to N independent (H, D) matrices,
    one owned by each row.
    """
    bank, x = _wrap(bank), _wrap(x)
    if bank.ndim != 3:
        raise ShapeError("bank_apply: bank must have shape (N, H, D)")
    if x.ndim < 2 or x.shape[-2] != bank.shape[0] or x.shape[-1] != bank.shape[2]:
        raise ShapeError(
            f"bank_apply: input shape {x.shape} incompatible with bank {bank.shape}"
        )

    # batched matmul over the row axis keeps this on BLAS
    n, h, d = bank.shape
    lead = x.shape[:-2]
    xf = x.data.reshape(-1, n, d).transpose(1, 0, 2)  # (n, b, d)

    def backward(g):
        gf = g.reshape(-1, n, h).transpose(1, 0, 2)  # (n, b, h)
        out = []
        if bank.requires_grad:
            gb = np.matmul(gf.transpose(0, 2, 1), xf)  # (n, h, d)
            out.append((bank, np.ascontiguousarray(gb)))
        if x.requires_grad:
            gx = np.matmul(gf, bank.data).transpose(1, 0, 2)
            out.append((x, np.ascontiguousarray(gx.reshape(x.shape))))
        return out

    data = np.matmul(xf, bank.data.transpose(0, 2, 1))  # (n, b, h)
    data = np.ascontiguousarray(data.transpose(1, 0, 2).reshape(lead + (n, h)))
    return _make(data, (bank, x), backward, "bank_apply")


def pairwise_scores(q, table: np.ndarray) -> DiffTensor:
    """Row-query dot products against a constant pairwise table.

    out[..., i, j] = q[..., i, :] . table[i, j, :] for ``q`` of shape
    (..., N, H) and ``table`` of shape (N, N, H).
    """
    q = _wrap(q)
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 3 or table.shape[0] != table.shape[1]:
        raise ShapeError("pairwise_scores: table must have shape (N, N, H)")
    if q.ndim < 2 or q.shape[-2] != table.shape[0] or q.shape[-1] != table.shape[2]:
        raise ShapeError(
            f"pairwise_scores: query shape {q.shape} incompatible with table {table.shape}"
        )

    # batched matmul over the query-row axis keeps this on BLAS
    n, h = table.shape[0], table.shape[2]
    lead = q.shape[:-2]

    def backward(g):
        gf = g.reshape(-1, n, n).transpose(1, 0, 2)  # (i, b, j)
        gq = np.matmul(gf, table).transpose(1, 0, 2)  # (b, i, h)
        return [(q, np.ascontiguousarray(gq.reshape(q.shape)))]

    qf = q.data.reshape(-1, n, h).transpose(1, 0, 2)  # (i, b, h)
    data = np.matmul(qf, table.transpose(0, 2, 1))  # (i, b, j)
    data = np.ascontiguousarray(data.transpose(1, 0, 2).reshape(lead + (n, n)))
    return _make(data, (q,), backward, "pairwise_scores")
