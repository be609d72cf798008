"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A ``Tensor`` wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar result walks the tape once in reverse topological
order and accumulates ``grad`` on every tensor with ``requires_grad``.

Only the operations needed by the graph encoder / SPIB stack are provided:
broadcast arithmetic, matmul, concat, row gather, segment reductions (for
message aggregation and graph pooling) and a handful of elementwise
nonlinearities.  Everything is double precision by design: the test suite
leans on finite-difference checks that would drown in float32 noise.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "parameter", "constant", "concat", "gather", "col_slice",
    "take_per_row", "segment_sum", "segment_mean", "segment_max",
    "sigmoid", "silu", "leaky_relu", "exp", "log", "square",
    "tsum", "tmean", "logsumexp", "log_softmax", "segment_softmax",
    "IndexPlan",
]


class Tensor:
    """Node of the autodiff tape.

    ``values`` is always a float64 ndarray (scalars become 0-d arrays).
    ``grad`` has the same shape and is allocated lazily during backward.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, parents=(), backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.values.shape

    def _accumulate(self, g, owned=False):
        # owned=True promises g is a fresh, exclusively held array of the
        # right shape, so the first accumulation can adopt it without copying
        if self.grad is None:
            self.grad = g if owned else np.array(g)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Propagate gradients from this tensor back to all leaves.

        ``seed`` defaults to 1.0 and must match this tensor's shape otherwise.
        Each tape node is visited exactly once, in reverse topological order.
        """
        if seed is None:
            if self.values.size != 1:
                raise ValueError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.values)
        topo = _toposort(self)
        self._accumulate(np.broadcast_to(np.asarray(seed, dtype=np.float64), self.values.shape))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def parameter(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def constant(values):
    return Tensor(values)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad if grad.shape == shape else grad.reshape(shape)


def _acc_unb(t, g, fresh=False):
    """Unbroadcast-and-accumulate; adopts the buffer when provably fresh."""
    u = _unbroadcast(g, t.values.shape)
    t._accumulate(u, owned=(u.base is None and (fresh or u is not g)))


# -- arithmetic ----------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values + b.values, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            _acc_unb(a, g)
        if b.requires_grad:
            _acc_unb(b, g)

    out._backward = backward
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values - b.values, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            _acc_unb(a, g)
        if b.requires_grad:
            _acc_unb(b, -g, fresh=True)

    out._backward = backward
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values * b.values, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            _acc_unb(a, g * b.values, fresh=True)
        if b.requires_grad:
            _acc_unb(b, g * a.values, fresh=True)

    out._backward = backward
    return out


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values / b.values, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            _acc_unb(a, g / b.values, fresh=True)
        if b.requires_grad:
            _acc_unb(b, -g * a.values / (b.values * b.values), fresh=True)

    out._backward = backward
    return out


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    out = Tensor(a.values @ b.values, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.values.T, owned=True)
        if b.requires_grad:
            b._accumulate(a.values.T @ g, owned=True)

    out._backward = backward
    return out


# -- index plans -----------------------------------------------------------

class IndexPlan:
    """Precomputed bookkeeping for scatter/segment ops over a fixed index set.

    Building one costs an argsort (only when the ids are unsorted); reusing it
    turns every scatter-add on the tape into a reduceat, which matters because
    message passing scatters the same topology hundreds of times per batch.
    """

    def __init__(self, idx, n_rows):
        idx = np.asarray(idx, dtype=np.int64)
        self.idx = idx
        self.n_rows = int(n_rows)
        self.counts = np.bincount(idx, minlength=self.n_rows)
        self.empty = self.counts == 0
        self.any_empty = bool(self.empty.any())
        if len(idx) and np.any(np.diff(idx) < 0):
            self.order = np.argsort(idx, kind="stable")
            sidx = idx[self.order]
        else:
            self.order = None
            sidx = idx
        starts = np.searchsorted(sidx, np.arange(self.n_rows))
        self.starts = np.minimum(starts, max(len(idx) - 1, 0))
        # equal-degree topologies (complete graphs, per-graph pooling) reduce
        # by a plain reshape, which is far cheaper than reduceat
        self.uniform = (len(idx) > 0 and not self.any_empty
                        and int(self.counts.min()) == int(self.counts.max()))

    def scatter_add(self, rows):
        """Sum ``rows`` (len(idx), ...) into ``n_rows`` buckets."""
        if len(self.idx) == 0:
            return np.zeros((self.n_rows,) + rows.shape[1:], dtype=rows.dtype)
        if self.order is not None:
            rows = rows[self.order]
        if self.uniform:
            shaped = rows.reshape((self.n_rows, -1) + rows.shape[1:])
            return shaped.sum(axis=1)
        out = np.add.reduceat(rows, self.starts, axis=0)
        if self.any_empty:
            out[self.empty] = 0.0
        return out

    def scatter_max(self, rows):
        if len(self.idx) == 0:
            return np.full((self.n_rows,) + rows.shape[1:], -np.inf)
        if self.order is not None:
            rows = rows[self.order]
        if self.uniform:
            shaped = rows.reshape((self.n_rows, -1) + rows.shape[1:])
            return shaped.max(axis=1)
        out = np.maximum.reduceat(rows, self.starts, axis=0)
        if self.any_empty:
            out[self.empty] = -np.inf
        return out


def _plan_for(idx, n_rows, plan):
    if plan is None:
        return IndexPlan(idx, n_rows)
    return plan


# -- shape ops -----------------------------------------------------------

def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    out._backward = backward
    return out


def gather(x, idx, plan=None):
    """Select rows ``x[idx]``; backward scatter-adds into the source rows."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.values[idx], parents=(x,))

    def backward(g):
        if x.requires_grad:
            p = _plan_for(idx, x.values.shape[0], plan)
            x._accumulate(p.scatter_add(g), owned=True)

    out._backward = backward
    return out


def col_slice(x, lo, hi):
    x = _as_tensor(x)
    out = Tensor(x.values[:, lo:hi], parents=(x,))

    def backward(g):
        if x.requires_grad:
            acc = np.zeros_like(x.values)
            acc[:, lo:hi] = g
            x._accumulate(acc, owned=True)

    out._backward = backward
    return out


def take_per_row(x, cols):
    """``out[i] = x[i, cols[i]]`` for a 2-D tensor; used for label log-probs."""
    x = _as_tensor(x)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.values.shape[0])
    out = Tensor(x.values[rows, cols], parents=(x,))

    def backward(g):
        if x.requires_grad:
            acc = np.zeros_like(x.values)
            acc[rows, cols] = g
            x._accumulate(acc, owned=True)

    out._backward = backward
    return out


# -- segment reductions ---------------------------------------------------

def segment_sum(x, seg, n_seg, plan=None):
    """Sum rows of ``x`` into ``n_seg`` buckets given by ``seg`` (len = rows)."""
    x = _as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    p = _plan_for(seg, n_seg, plan)
    out = Tensor(p.scatter_add(x.values), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g[seg], owned=True)

    out._backward = backward
    return out


def segment_mean(x, seg, n_seg, plan=None):
    x = _as_tensor(x)
    p = _plan_for(np.asarray(seg, dtype=np.int64), n_seg, plan)
    counts = np.maximum(p.counts.astype(np.float64), 1.0)
    counts = counts.reshape((n_seg,) + (1,) * (x.values.ndim - 1))
    return div(segment_sum(x, seg, n_seg, plan=p), Tensor(counts))


def segment_max(x, seg, n_seg, plan=None):
    """Per-segment elementwise max of a 2-D tensor; gradient reaches argmax rows only."""
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise ValueError("segment_max expects a 2-D tensor")
    seg = np.asarray(seg, dtype=np.int64)
    n_rows, n_feat = x.values.shape
    p = _plan_for(seg, n_seg, plan)
    vals = p.scatter_max(x.values)
    # first row per segment attaining the max wins ties
    if n_rows:
        ties = x.values == vals[seg]
        rowid = np.where(ties, np.arange(n_rows)[:, None], n_rows)
        if p.order is not None:
            rowid = rowid[p.order]
        argrow = np.minimum.reduceat(rowid, p.starts, axis=0)
        argrow[argrow == n_rows] = -1
        if p.any_empty:
            argrow[p.empty] = -1
    else:
        argrow = np.full((n_seg, n_feat), -1, dtype=np.int64)
    out = Tensor(vals, parents=(x,))

    def backward(g):
        if x.requires_grad:
            acc = np.zeros_like(x.values)
            cols = np.broadcast_to(np.arange(n_feat), (n_seg, n_feat))
            ok = argrow >= 0
            np.add.at(acc, (argrow[ok], cols[ok]), g[ok])
            x._accumulate(acc, owned=True)

    out._backward = backward
    return out


# -- elementwise nonlinearities -------------------------------------------

def sigmoid(x):
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.values))
    out = Tensor(s, parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * s * (1.0 - s), owned=True)

    out._backward = backward
    return out


def silu(x):
    x = _as_tensor(x)
    s = np.exp(np.negative(x.values))
    s += 1.0
    np.reciprocal(s, out=s)
    out = Tensor(x.values * s, parents=(x,))

    def backward(g):
        if x.requires_grad:
            # d silu = s (1 + x (1 - s)), built in place off one temporary
            d = 1.0 - s
            d *= x.values
            d += 1.0
            d *= s
            d *= g
            x._accumulate(d, owned=True)

    out._backward = backward
    return out


def leaky_relu(x, slope=0.2):
    x = _as_tensor(x)
    out = Tensor(np.where(x.values > 0, x.values, slope * x.values), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * np.where(x.values > 0, 1.0, slope), owned=True)

    out._backward = backward
    return out


def exp(x):
    x = _as_tensor(x)
    e = np.exp(x.values)
    out = Tensor(e, parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * e, owned=True)

    out._backward = backward
    return out


def log(x):
    x = _as_tensor(x)
    out = Tensor(np.log(x.values), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g / x.values, owned=True)

    out._backward = backward
    return out


def square(x):
    x = _as_tensor(x)
    return mul(x, x)


def reshape(x, shape):
    x = _as_tensor(x)
    out = Tensor(x.values.reshape(shape), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.values.shape))

    out._backward = backward
    return out


# -- reductions ------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = Tensor(x.values.sum(axis=axis, keepdims=keepdims), parents=(x,))

    def backward(g):
        if x.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(g, x.values.shape).copy(), owned=True)

    out._backward = backward
    return out


def tmean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    n = x.values.size if axis is None else x.values.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(x, axis=1):
    """Row-stable logsumexp; the max shift is treated as a constant."""
    x = _as_tensor(x)
    m = np.max(x.values, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = sub(x, Tensor(m))
    s = tsum(exp(shifted), axis=axis, keepdims=True)
    return add(log(s), Tensor(m))


def log_softmax(x, axis=1):
    return sub(x, logsumexp(x, axis=axis))


def segment_softmax(scores, seg, n_seg, plan=None):
    """Softmax of 1-D ``scores`` within each segment (per-destination weights)."""
    scores = _as_tensor(scores)
    seg = np.asarray(seg, dtype=np.int64)
    p = _plan_for(seg, n_seg, plan)
    m = p.scatter_max(scores.values)
    m = np.where(np.isfinite(m), m, 0.0)
    e = exp(sub(scores, Tensor(m[seg])))
    denom = segment_sum(e, seg, n_seg, plan=p)
    return div(e, gather(denom, seg, plan=p))
