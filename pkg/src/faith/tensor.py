"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  Outside a ``with Tape():`` block
nothing is recorded, which is how evaluation runs.

Backward rules live in the module-level ``_BACKWARD`` table and are looked
up when the tape is replayed, so a rule can be swapped out for testing
(see :func:`corrupt_backward`).
"""

import contextlib
import threading

import numpy as np

from faith import kernels

DTYPE = np.float64
CLAMP_EPS = 1e-12


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


# count of probabilities clamped inside cross_entropy
clamp_warnings = 0

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Value:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "ctx", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = None
        self.parents = ()
        self.ctx = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    @property
    def is_leaf(self):
        return self.op is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Value(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in creation order, so replaying them backwards is
    a valid reverse topological order.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss):
        backward(loss, self)


def as_value(x):
    return x if isinstance(x, Value) else Value(x)


def parameter(data, name=None):
    return Value(data, requires_grad=True, name=name)


def _make(data, op, parents, ctx=None):
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.op = None
    out.parents = ()
    out.ctx = None
    out.name = None
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = parents
        out.ctx = ctx
        tape.records.append(out)
    return out


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        if loss.requires_grad:
            _accumulate(loss, seed)
        return
    grads = {id(loss): seed}
    for out in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = _BACKWARD[out.op](g, out, *out.parents)
        for parent, pg in zip(out.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                _accumulate(parent, pg)
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _accumulate(leaf, g):
    g = np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad += g


def zero_grad(values):
    for v in values:
        v.grad = None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_value(a), as_value(b)
    return _make(a.data + b.data, "add", (a, b))


def _add_bwd(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b):
    a, b = as_value(a), as_value(b)
    return _make(a.data - b.data, "sub", (a, b))


def _sub_bwd(g, out, a, b):
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def mul(a, b):
    """Elementwise (hadamard) product; ``b`` may be a row vector or scalar."""
    a, b = as_value(a), as_value(b)
    return _make(a.data * b.data, "mul", (a, b))


def _mul_bwd(g, out, a, b):
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


hadamard = mul


def scale(a, c):
    return _make(a.data * c, "scale", (a,), c)


def _scale_bwd(g, out, a):
    return (g * out.ctx,)


def relu(a):
    return _make(np.maximum(a.data, 0.0), "relu", (a,))


def _relu_bwd(g, out, a):
    return (g * (a.data > 0.0),)


def clamp_min(a, lo):
    return _make(np.maximum(a.data, lo), "clamp_min", (a,), lo)


def _clamp_min_bwd(g, out, a):
    return (g * (a.data > out.ctx),)


def power(a, exponent):
    return _make(a.data ** exponent, "power", (a,), exponent)


def _power_bwd(g, out, a):
    e = out.ctx
    return (g * e * a.data ** (e - 1),)


def dropout(a, p, train, rng):
    """Inverted dropout: kept units are scaled by 1/(1-p) at train time."""
    if not train or p <= 0.0:
        return a
    if p >= 1.0:
        raise ContractError("dropout rate must be < 1")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, "dropout", (a,), keep)


def _dropout_bwd(g, out, a):
    return (g * out.ctx,)


# -------------------------------------------------------------- reductions

def sum(a, axis=None):
    return _make(np.sum(a.data, axis=axis), "sum", (a,), axis)


def _sum_bwd(g, out, a):
    axis = out.ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def mean(a, axis=None):
    return _make(np.mean(a.data, axis=axis), "mean", (a,), axis)


def _mean_bwd(g, out, a):
    axis = out.ctx
    n = a.data.size if axis is None else a.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, a.shape).copy(),)


# ----------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b))


def _matmul_bwd(g, out, a, b):
    ga = g @ b.data.T if a.requires_grad else None
    gb = a.data.T @ g if b.requires_grad else None
    return ga, gb


def transpose(a):
    return _make(a.data.T.copy(), "transpose", (a,))


def _transpose_bwd(g, out, a):
    return (g.T,)


def scale_rows(a, v):
    """diag(v) @ a for a 1-d ``v``."""
    return _make(a.data * v.data[:, None], "scale_rows", (a, v))


def _scale_rows_bwd(g, out, a, v):
    return g * v.data[:, None], np.sum(g * a.data, axis=1)


def scale_cols(a, v):
    """a @ diag(v) for a 1-d ``v``."""
    return _make(a.data * v.data[None, :], "scale_cols", (a, v))


def _scale_cols_bwd(g, out, a, v):
    return g * v.data[None, :], np.sum(g * a.data, axis=0)


def fill_diagonal(a, value):
    data = a.data.copy()
    np.fill_diagonal(data, value)
    return _make(data, "fill_diagonal", (a,))


def _fill_diagonal_bwd(g, out, a):
    g = g.copy()
    np.fill_diagonal(g, 0.0)
    return (g,)


# ------------------------------------------------------------ row plumbing

def concat_rows(values):
    values = [as_value(v) for v in values]
    widths = {v.shape[1:] for v in values}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows width mismatch: {[v.shape for v in values]}")
    sizes = [v.shape[0] for v in values]
    return _make(np.concatenate([v.data for v in values], axis=0), "concat_rows",
                 tuple(values), np.cumsum(sizes)[:-1])


def _concat_rows_bwd(g, out, *parents):
    return tuple(np.split(g, out.ctx, axis=0))


def gather_rows(a, index):
    index = np.asarray(index, dtype=np.int64)
    return _make(a.data[index], "gather_rows", (a,), index)


def _gather_rows_bwd(g, out, a):
    ga = np.zeros_like(a.data)
    np.add.at(ga, out.ctx, g)
    return (ga,)


def scatter_add_rows(a, src, dst, n_out):
    """Row scatter: out[dst[e]] += a[src[e]].  Used for neighbour sums and
    per-graph readouts."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    data = kernels.scatter_add_rows(a.data, src, dst, n_out)
    return _make(data, "scatter_add_rows", (a,), (src, dst))


def _scatter_add_rows_bwd(g, out, a):
    src, dst = out.ctx
    return (kernels.scatter_add_rows(g, dst, src, a.shape[0]),)


# ------------------------------------------------------- normalised outputs

def row_softmax(a, mask=None):
    """Softmax along each row after max-subtraction.

    With a boolean ``mask``, entries where it is False get probability 0;
    every row needs at least one True entry.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ContractError("row_softmax mask leaves an empty row")
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - np.max(x, axis=1, keepdims=True))
    return _make(e / np.sum(e, axis=1, keepdims=True), "row_softmax", (a,))


def _row_softmax_bwd(g, out, a):
    y = out.data
    return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of ``labels`` under row distributions.

    Probabilities at or below 1e-12 are clamped and counted in
    ``clamp_warnings``; the clamped entries pass no gradient.
    """
    global clamp_warnings
    labels = np.asarray(labels, dtype=np.int64)
    m, c = probs.shape
    if labels.shape != (m,):
        raise ShapeError(f"cross_entropy labels {labels.shape} vs probs {probs.shape}")
    if m and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"label out of range for {c} classes")
    picked = probs.data[np.arange(m), labels]
    clamped = picked <= CLAMP_EPS
    if clamped.any():
        clamp_warnings += int(clamped.sum())
    safe = np.where(clamped, CLAMP_EPS, picked)
    loss = -np.sum(np.log(safe)) / m
    return _make(np.array(loss), "cross_entropy", (probs,), (labels, safe, clamped))


def _cross_entropy_bwd(g, out, probs):
    labels, safe, clamped = out.ctx
    m = labels.shape[0]
    gp = np.zeros_like(probs.data)
    gp[np.arange(m), labels] = np.where(clamped, 0.0, -1.0 / (m * safe))
    return (gp * g,)


def softmax_cross_entropy(logits, labels):
    """cross_entropy(row_softmax(logits), labels) via log-sum-exp.

    Never clamps, so saturated rows still pass the bounded gradient
    softmax - onehot back to the logits.
    """
    labels = np.asarray(labels, dtype=np.int64)
    m, c = logits.shape
    if labels.shape != (m,):
        raise ShapeError(f"softmax_cross_entropy labels {labels.shape} vs logits {logits.shape}")
    if m and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"label out of range for {c} classes")
    x = logits.data
    shifted = x - np.max(x, axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -np.sum(log_p[np.arange(m), labels]) / m
    return _make(np.array(loss), "softmax_cross_entropy", (logits,), (labels, log_p))


def _softmax_cross_entropy_bwd(g, out, logits):
    labels, log_p = out.ctx
    m = labels.shape[0]
    grad = np.exp(log_p)
    grad[np.arange(m), labels] -= 1.0
    return (grad * (g / m),)


def row_normalize(a):
    """Each row divided by its Euclidean norm; zero rows stay zero."""
    norms = np.sqrt(np.sum(a.data * a.data, axis=1))
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return _make(a.data * inv[:, None], "row_normalize", (a,), inv)


def _row_normalize_bwd(g, out, a):
    inv = out.ctx
    y = out.data
    return ((g - y * np.sum(g * y, axis=1, keepdims=True)) * inv[:, None],)


def cosine_rows(a, b):
    """Pairwise cosine similarity; pairs involving a zero row give 0."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_rows width mismatch: {a.shape} vs {b.shape}")
    na = row_normalize(a)
    nb = na if b is a else row_normalize(b)
    return matmul(na, transpose(nb))


def sq_dist_rows(a, b):
    """Pairwise squared Euclidean distances ||a_i - b_j||^2."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"sq_dist_rows width mismatch: {a.shape} vs {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    return _make(np.sum(diff * diff, axis=2), "sq_dist_rows", (a, b), diff)


def _sq_dist_rows_bwd(g, out, a, b):
    diff = out.ctx
    w = 2.0 * g[:, :, None] * diff
    return w.sum(axis=1), -w.sum(axis=0)


_BACKWARD = {
    "add": _add_bwd,
    "sub": _sub_bwd,
    "mul": _mul_bwd,
    "scale": _scale_bwd,
    "relu": _relu_bwd,
    "clamp_min": _clamp_min_bwd,
    "power": _power_bwd,
    "dropout": _dropout_bwd,
    "sum": _sum_bwd,
    "mean": _mean_bwd,
    "matmul": _matmul_bwd,
    "transpose": _transpose_bwd,
    "scale_rows": _scale_rows_bwd,
    "scale_cols": _scale_cols_bwd,
    "fill_diagonal": _fill_diagonal_bwd,
    "concat_rows": _concat_rows_bwd,
    "gather_rows": _gather_rows_bwd,
    "scatter_add_rows": _scatter_add_rows_bwd,
    "row_softmax": _row_softmax_bwd,
    "cross_entropy": _cross_entropy_bwd,
    "softmax_cross_entropy": _softmax_cross_entropy_bwd,
    "row_normalize": _row_normalize_bwd,
    "sq_dist_rows": _sq_dist_rows_bwd,
}


@contextlib.contextmanager
def corrupt_backward(op, factor=1.5):
    """Test-only hook: scale the gradients produced by one backward rule."""
    original = _BACKWARD[op]

    def broken(g, out, *parents):
        return tuple(None if x is None else x * factor for x in original(g, out, *parents))

    _BACKWARD[op] = broken
    try:
        yield
    finally:
        _BACKWARD[op] = original
