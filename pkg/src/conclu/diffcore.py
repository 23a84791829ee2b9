"""Minimal reverse-mode differentiation over dense float64 arrays.

Supplies exactly the primitives the clustering and contrasting losses need:
matrix products, row softmax, leaky ReLU, (grouped) batch normalization,
column-wise max pooling with argmax gradient routing, l2 normalization, a
stop-gradient marker, and a finite-difference verification harness.

Values are computed eagerly; when a :class:`Tape` is active, every primitive
whose inputs require gradients records a node holding a backward closure.
``backward(loss)`` walks the tape once in reverse, accumulating into one
gradient buffer per tensor (row-extraction ops add into slices of that
buffer in place, so batches of extractions stay linear in total size).
Everything is double precision and single-threaded per tape.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    BatchTooSmallError,
    DegenerateNormError,
    EmptyInputError,
    NumericError,
    ShapeError,
    TapeError,
)

_TAPE_STACK = []

BN_MOMENTUM = 0.9
LEAKY_SLOPE = 0.01


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation.

    ``values`` is treated as immutable by all primitives; user arrays are
    copied on construction so later in-place edits of the source cannot
    reach the tape.
    """

    __slots__ = ("values", "requires_grad")

    def __init__(self, values, requires_grad=False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _result(cls, values, requires_grad=False):
        # internal: wrap a freshly allocated result without copying
        t = cls.__new__(cls)
        t.values = values
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.values.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # light operator sugar; every dunder delegates to a module-level primitive
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction. A tape supports exactly one backward traversal;
    reuse raises :class:`TapeError`.
    """

    def __init__(self):
        self.nodes = []
        self.finished = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


class _Node:
    __slots__ = ("out", "accumulate")

    def __init__(self, out, accumulate):
        self.out = out
        self.accumulate = accumulate


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x):
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(out, inputs, accumulate):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, accumulate))
    return out


class _GradStore(dict):
    """Tensor-keyed gradient buffers with copy-on-write borrowing.

    A pass-through gradient (e.g. the unchanged upstream array from an add)
    is stored by reference and marked borrowed; it is copied only if a
    second contribution or an in-place slice write actually needs a
    private buffer. Safe because a node's output buffer is final before
    its own backward closure runs.
    """

    __slots__ = ("borrowed",)

    def __init__(self):
        super().__init__()
        self.borrowed = set()


def _add_grad(store, t, g, own=False):
    """Accumulate ``g`` into the gradient buffer of ``t``.

    ``own=True`` promises ``g`` is a freshly allocated writable array the
    caller gives up, letting it become the buffer without a copy.
    """
    if not t.requires_grad:
        return
    have = store.get(t)
    if have is None:
        store[t] = g
        if not own:
            store.borrowed.add(t)
    elif t in store.borrowed:
        store[t] = have + g
        store.borrowed.discard(t)
    else:
        have += g


def _grad_buffer(store, t):
    have = store.get(t)
    if have is None:
        have = np.zeros_like(t.values)
        store[t] = have
    elif t in store.borrowed:
        have = np.array(have)
        store[t] = have
        store.borrowed.discard(t)
    return have


def backward(loss):
    """Accumulate gradients of a scalar loss over the active tape.

    Returns a dict keyed by Tensor identity; a requires-grad tensor that
    the loss does not depend on is simply absent (its gradient is zero).
    The traversal order is the reversed tape, so results are deterministic.
    """
    tape = active_tape()
    if tape is None:
        raise TapeError("backward() requires an active tape")
    if tape.finished:
        raise TapeError("backward() already ran on this tape")
    if loss.values.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.values.shape}")
    tape.finished = True

    store = _GradStore()
    store[loss] = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        g_out = store.get(node.out)
        if g_out is None:
            continue
        node.accumulate(g_out, store)
    return store


def stop_gradient(x):
    """Pass values through unchanged; contribute zero gradient upstream."""
    x = as_tensor(x)
    return Tensor._result(x.values, requires_grad=False)


# ---------------------------------------------------------------------------
# arithmetic primitives


def _unbroadcast(g, shape):
    # reduce an output gradient back to an input shape that was broadcast
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    """Elementwise sum with numpy broadcasting (bias rows, scalars)."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._result(a.values + b.values)

    def acc(g, store):
        _add_grad(store, a, _unbroadcast(g, a.values.shape))
        _add_grad(store, b, _unbroadcast(g, b.values.shape))

    return _record(out, (a, b), acc)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._result(a.values - b.values)

    def acc(g, store):
        _add_grad(store, a, _unbroadcast(g, a.values.shape))
        _add_grad(store, b, _unbroadcast(-g, b.values.shape), own=True)

    return _record(out, (a, b), acc)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._result(a.values * b.values)

    def acc(g, store):
        _add_grad(store, a, _unbroadcast(g * b.values, a.values.shape), own=True)
        _add_grad(store, b, _unbroadcast(g * a.values, b.values.shape), own=True)

    return _record(out, (a, b), acc)


def scale(x, alpha):
    x = as_tensor(x)
    alpha = float(alpha)
    out = Tensor._result(x.values * alpha)

    def acc(g, store):
        _add_grad(store, x, g * alpha, own=True)

    return _record(out, (x,), acc)


def matmul(a, b):
    """2D matrix product; gradients g @ b.T and a.T @ g."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(
            f"matmul needs 2D operands, got {a.values.shape} and {b.values.shape}"
        )
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.values.shape} vs {b.values.shape}"
        )
    out = Tensor._result(a.values @ b.values)

    def acc(g, store):
        _add_grad(store, a, g @ b.values.T, own=True)
        _add_grad(store, b, a.values.T @ g, own=True)

    return _record(out, (a, b), acc)


def transpose(x):
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"transpose needs a 2D tensor, got {x.values.shape}")
    out = Tensor._result(np.ascontiguousarray(x.values.T))

    def acc(g, store):
        _add_grad(store, x, g.T)

    return _record(out, (x,), acc)


def sum_all(x):
    """Sum of all entries as a scalar tensor."""
    x = as_tensor(x)
    out = Tensor._result(np.asarray(x.values.sum()))

    def acc(g, store):
        _add_grad(store, x, np.broadcast_to(g, x.values.shape))

    return _record(out, (x,), acc)


def colsum(x):
    """Column sums of an n-by-j matrix, returning a length-j vector."""
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"colsum needs a 2D tensor, got {x.values.shape}")
    out = Tensor._result(x.values.sum(axis=0))

    def acc(g, store):
        _add_grad(store, x, np.broadcast_to(g, x.values.shape))

    return _record(out, (x,), acc)


def scale_rows(x, s):
    """Multiply row i of ``x`` by ``s[i]``."""
    x, s = as_tensor(x), as_tensor(s)
    if x.values.ndim != 2 or s.values.shape != (x.values.shape[0],):
        raise ShapeError(
            f"scale_rows needs (n,d) and (n,), got {x.values.shape} and {s.values.shape}"
        )
    out = Tensor._result(x.values * s.values[:, None])

    def acc(g, store):
        _add_grad(store, x, g * s.values[:, None], own=True)
        _add_grad(store, s, (g * x.values).sum(axis=1), own=True)

    return _record(out, (x, s), acc)


def reciprocal(x):
    x = as_tensor(x)
    out = Tensor._result(1.0 / x.values)

    def acc(g, store):
        _add_grad(store, x, -g / (x.values * x.values), own=True)

    return _record(out, (x,), acc)


def log(x, floor=None):
    """Natural log, optionally clamping the argument at ``floor`` first.

    With a floor, entries at or below it get zero gradient (the clamp is
    active there).
    """
    x = as_tensor(x)
    if floor is None:
        out = Tensor._result(np.log(x.values))

        def acc(g, store):
            _add_grad(store, x, g / x.values, own=True)

        return _record(out, (x,), acc)

    clamped = np.maximum(x.values, floor)
    out = Tensor._result(np.log(clamped))

    def acc_clamped(g, store):
        _add_grad(store, x, np.where(x.values > floor, g / clamped, 0.0), own=True)

    return _record(out, (x,), acc_clamped)


def absolute(x):
    """Elementwise absolute value; subgradient 0 at exact zeros."""
    x = as_tensor(x)
    out = Tensor._result(np.abs(x.values))

    def acc(g, store):
        _add_grad(store, x, g * np.sign(x.values), own=True)

    return _record(out, (x,), acc)


def dot(u, v):
    """Inner product of two vectors as a scalar tensor."""
    return sum_all(mul(u, v))


# ---------------------------------------------------------------------------
# neural-net primitives


def leaky_relu(x, slope=LEAKY_SLOPE):
    """y = x for x >= 0 else slope * x; derivative at exactly 0 taken as 1."""
    if not 0.0 < slope < 1.0:
        raise ShapeError(f"leaky_relu slope must be in (0,1), got {slope}")
    x = as_tensor(x)
    factor = np.where(x.values >= 0.0, 1.0, slope)
    out = Tensor._result(x.values * factor)

    def acc(g, store):
        _add_grad(store, x, g * factor, own=True)

    return _record(out, (x,), acc)


def row_softmax(x):
    """Row-wise softmax with per-row max subtraction for stability."""
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"row_softmax needs a 2D tensor, got {x.values.shape}")
    if np.isnan(x.values).any():
        raise NumericError("row_softmax input contains NaN")
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor._result(s)

    def acc(g, store):
        _add_grad(store, x, s * (g - (g * s).sum(axis=1, keepdims=True)), own=True)

    return _record(out, (x,), acc)


class RunningStats:
    """Per-feature running mean/variance for batch-norm eval mode."""

    __slots__ = ("mean", "var")

    def __init__(self, dim):
        self.mean = np.zeros(dim, dtype=np.float64)
        self.var = np.ones(dim, dtype=np.float64)

    def copy(self):
        c = RunningStats(self.mean.shape[0])
        c.mean = self.mean.copy()
        c.var = self.var.copy()
        return c


def batch_norm(
    x,
    bn_scale,
    bn_shift,
    eps=1e-5,
    mode="train",
    stats=None,
    update_running=True,
    group_size=None,
):
    """Column-wise batch normalization with an affine transform.

    Train mode normalizes each column by batch mean and (biased) variance;
    eval mode uses the running statistics. ``group_size`` splits the rows
    into contiguous blocks normalized independently, so a whole batch of
    point clouds can be normalized per-cloud in one call. Running stats are
    updated by exponential moving average (momentum 0.9) group by group in
    row order, matching what sequential per-group calls would produce.
    """
    x, bn_scale, bn_shift = as_tensor(x), as_tensor(bn_scale), as_tensor(bn_shift)
    if x.values.ndim != 2:
        raise ShapeError(f"batch_norm needs a 2D tensor, got {x.values.shape}")
    n, d = x.values.shape
    if bn_scale.values.shape != (d,) or bn_shift.values.shape != (d,):
        raise ShapeError(
            f"batch_norm affine params must have shape ({d},), got "
            f"{bn_scale.values.shape} and {bn_shift.values.shape}"
        )
    if mode not in ("train", "eval"):
        raise ShapeError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    if mode == "eval":
        if stats is None:
            raise ShapeError("batch_norm eval mode requires running stats")
        ivar = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.values - stats.mean) * ivar
        out = Tensor._result(xhat * bn_scale.values + bn_shift.values)

        def acc_eval(g, store):
            _add_grad(store, x, g * (bn_scale.values * ivar), own=True)
            _add_grad(store, bn_scale, (g * xhat).sum(axis=0), own=True)
            _add_grad(store, bn_shift, g.sum(axis=0), own=True)

        return _record(out, (x, bn_scale, bn_shift), acc_eval)

    gs = n if group_size is None else int(group_size)
    if gs < 2:
        raise BatchTooSmallError(f"batch_norm train mode needs >= 2 rows, got {gs}")
    if n % gs != 0:
        raise ShapeError(f"row count {n} not divisible by group size {gs}")
    ngroups = n // gs

    grouped = x.values.reshape(ngroups, gs, d)
    mean = grouped.mean(axis=1, keepdims=True)
    centered = grouped - mean
    var = np.einsum("gnd,gnd->gd", centered, centered)[:, None, :] / gs
    ivar = 1.0 / np.sqrt(var + eps)
    centered *= ivar  # becomes xhat in place
    xhat = centered.reshape(n, d)
    out_vals = xhat * bn_scale.values
    out_vals += bn_shift.values
    out = Tensor._result(out_vals)

    if stats is not None and update_running:
        for gidx in range(ngroups):
            stats.mean = BN_MOMENTUM * stats.mean + (1 - BN_MOMENTUM) * mean[gidx, 0]
            stats.var = BN_MOMENTUM * stats.var + (1 - BN_MOMENTUM) * var[gidx, 0]

    def acc_train(g, store):
        _add_grad(store, bn_scale, np.einsum("nd,nd->d", g, xhat), own=True)
        _add_grad(store, bn_shift, g.sum(axis=0), own=True)
        dx = (g * bn_scale.values).reshape(ngroups, gs, d)
        xh = xhat.reshape(ngroups, gs, d)
        m1 = dx.mean(axis=1, keepdims=True)
        m2 = np.einsum("gnd,gnd->gd", dx, xh)[:, None, :] / gs
        dx -= m1
        dx -= xh * m2
        dx *= ivar
        _add_grad(store, x, dx.reshape(n, d), own=True)

    return _record(out, (x, bn_scale, bn_shift), acc_train)


def max_pool_rows(x):
    """Columnwise maximum of an n-by-d matrix; gradient routes to the
    argmax row per column, lowest row index winning ties."""
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"max_pool_rows needs a 2D tensor, got {x.values.shape}")
    if x.values.shape[0] < 1 or x.values.size == 0:
        raise EmptyInputError("max_pool_rows on empty input")
    winners = x.values.argmax(axis=0)
    out = Tensor._result(x.values.max(axis=0))

    def acc(g, store):
        buf = _grad_buffer(store, x)
        buf[winners, np.arange(x.values.shape[1])] += g

    return _record(out, (x,), acc)


def l2_normalize(v, tiny=1e-300):
    """v / ||v||_2 for a vector; raises on (near-)zero norm."""
    v = as_tensor(v)
    if v.values.ndim != 1:
        raise ShapeError(f"l2_normalize needs a 1D tensor, got {v.values.shape}")
    norm = float(np.linalg.norm(v.values))
    if norm <= tiny:
        raise DegenerateNormError(f"cannot normalize vector with norm {norm:.3e}")
    vhat = v.values / norm
    out = Tensor._result(vhat)

    def acc(g, store):
        _add_grad(store, v, (g - vhat * (vhat * g).sum()) / norm, own=True)

    return _record(out, (v,), acc)


def normalize_rows(x, tiny=1e-300):
    """Normalize each row of a matrix to unit l2 norm."""
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"normalize_rows needs a 2D tensor, got {x.values.shape}")
    norms = np.linalg.norm(x.values, axis=1)
    bad = np.nonzero(norms <= tiny)[0]
    if bad.size:
        raise DegenerateNormError(f"row {bad[0]} has norm {norms[bad[0]]:.3e}")
    xhat = x.values / norms[:, None]
    out = Tensor._result(xhat)

    def acc(g, store):
        _add_grad(
            store,
            x,
            (g - xhat * (xhat * g).sum(axis=1, keepdims=True)) / norms[:, None],
            own=True,
        )

    return _record(out, (x,), acc)


# ---------------------------------------------------------------------------
# row assembly / extraction


def stack_rows(vectors):
    """Stack k same-length vectors into a k-by-d matrix."""
    vectors = [as_tensor(v) for v in vectors]
    if not vectors:
        raise EmptyInputError("stack_rows on empty list")
    out = Tensor._result(np.stack([v.values for v in vectors], axis=0))

    def acc(g, store):
        for i, v in enumerate(vectors):
            _add_grad(store, v, g[i])

    return _record(out, tuple(vectors), acc)


def take_row(x, i):
    """Row i of a matrix as a vector; gradient scatters back into row i."""
    x = as_tensor(x)
    i = int(i)
    out = Tensor._result(x.values[i].copy())

    def acc(g, store):
        _grad_buffer(store, x)[i] += g

    return _record(out, (x,), acc)


def take_rows(x, start, stop):
    """Contiguous row slice [start, stop) of a matrix."""
    x = as_tensor(x)
    start, stop = int(start), int(stop)
    out = Tensor._result(x.values[start:stop].copy())

    def acc(g, store):
        _grad_buffer(store, x)[start:stop] += g

    return _record(out, (x,), acc)


# ---------------------------------------------------------------------------
# verification harness


def finite_diff_check(f, params, h=1e-5, f_numeric=None):
    """Worst-component relative error of analytic vs central-difference grads.

    ``f`` is a zero-argument closure rebuilding the scalar loss from the
    current values of ``params``; it must be deterministic and free of side
    effects (batch-norm running-stat updates off). The relative error of a
    component is |analytic - numeric| / max(|analytic|, |numeric|, 1).

    For losses containing stop-gradient, pass ``f_numeric``: a closure whose
    stopped branches are frozen at their base values, so the central
    differences measure the same function the analytic gradient describes.
    """
    with Tape():
        grads = backward(f())
    if f_numeric is None:
        f_numeric = f

    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        analytic = (
            np.zeros_like(p.values) if analytic is None else np.asarray(analytic)
        )
        flat = p.values.reshape(-1)
        aflat = analytic.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f_numeric().item()
            flat[idx] = orig - h
            fm = f_numeric().item()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[idx] - numeric) / max(abs(aflat[idx]), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst
