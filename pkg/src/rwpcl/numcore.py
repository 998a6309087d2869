"""Dense float tensors with reverse-mode differentiation on a define-by-run tape.

Every forward pass records its operations on an explicit :class:`Tape`;
:func:`backward` walks the record once, in reverse execution order, and
accumulates gradients into the participating tensors. The graph is rebuilt
on every pass, which lets callers swap parameter values (e.g. perturbed
copies) between passes without invalidating anything.

Values are float32 by default. All ops are dtype-generic, so verification
code can rebuild the same graph from float64 leaves and replay it at full
precision.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, InputError, ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """N-dimensional float array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            raise InputError(f"tensor values must be float32 or float64, got {arr.dtype}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype):
        """New leaf tensor with the same values at another precision."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name, dtype=dtype)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar; scalars are treated as constants
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return affine(self, -1.0, float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __neg__(self):
        return affine(self, -1.0, 0.0)


class Tape:
    """Ordered record of one forward pass. ``backward`` consumes it exactly once."""

    def __init__(self):
        self._steps = []
        self._leaves = []
        self._leaf_ids = set()
        self._used = False

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise ContractError("tape context exited out of order")
        return False

    def __len__(self):
        return len(self._steps)


_STACK: list[Tape] = []


def _live(t: Tensor, tape: Tape) -> bool:
    # A tensor feeds gradient back if it is a trainable leaf or was itself
    # produced by an op recorded on this tape.
    return t.requires_grad or t._tape is tape


def _record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    tape = _STACK[-1] if _STACK else None
    if tape is None or tape._used:
        return out
    live = [_live(t, tape) for t in inputs]
    if not any(live):
        return out
    out._tape = tape
    for t, alive in zip(inputs, live):
        if alive and t.requires_grad and t._tape is not tape and id(t) not in tape._leaf_ids:
            tape._leaf_ids.add(id(t))
            tape._leaves.append(t)

    live_ids = {id(t) for t, alive in zip(inputs, live) if alive}

    def acc(t: Tensor, g) -> None:
        if id(t) not in live_ids:
            return
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        else:
            t.grad += g

    tape._steps.append((out, backward_fn, acc))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of every trainable leaf recorded on ``tape``.

    ``loss`` must be a scalar produced during the forward pass that recorded
    ``tape`` (a bare constant is allowed and yields all-zero gradients).
    Running backward twice on the same tape is an error.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._used:
        raise ContractError("backward already ran on this graph; record a new forward pass")
    if loss._tape is not None and loss._tape is not tape:
        raise ContractError("stale graph: the loss was recorded on a different forward pass")
    tape._used = True
    loss.grad = np.ones_like(loss.data)
    for out, backward_fn, acc in reversed(tape._steps):
        g = out.grad
        if g is None:
            continue
        backward_fn(g, acc)
    for leaf in tape._leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# shape rules

def _check_suffix(a_shape, b_shape):
    # Broadcasting is restricted to trailing-dimension alignment: the
    # lower-rank operand must equal the trailing suffix of the other.
    small, large = sorted((tuple(a_shape), tuple(b_shape)), key=len)
    if len(small) == len(large):
        if small != large:
            raise ShapeError(f"elementwise shapes disagree: {a_shape} vs {b_shape}")
    elif small != large[len(large) - len(small):]:
        raise ShapeError(f"shape {tuple(b_shape)} is not a trailing suffix of {tuple(a_shape)}")


def _reduce_to(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape)
    out = Tensor(a.data + b.data, dtype=a.dtype)

    def bwd(g, acc):
        acc(a, _reduce_to(g, a.shape))
        acc(b, _reduce_to(g, b.shape))

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape)
    out = Tensor(a.data - b.data, dtype=a.dtype)

    def bwd(g, acc):
        acc(a, _reduce_to(g, a.shape))
        acc(b, -_reduce_to(g, b.shape))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape)
    out = Tensor(a.data * b.data, dtype=a.dtype)

    def bwd(g, acc):
        acc(a, _reduce_to(g * b.data, a.shape))
        acc(b, _reduce_to(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """x * scale + shift with python-float constants."""
    out = Tensor(x.data * scale + shift, dtype=x.dtype)

    def bwd(g, acc):
        acc(x, g * scale)

    return _record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), dtype=x.dtype)

    def bwd(g, acc):
        acc(x, g * (x.data > 0))

    return _record(out, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to 1."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, dtype=x.dtype)

    def bwd(g, acc):
        acc(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _record(out, (x,), bwd)


LAYERNORM_EPS = 1e-5  # inside the square root; keeps zero-variance rows finite


def layernorm_rows(x: Tensor) -> Tensor:
    """Normalize each row of the last axis to mean 0, variance 1 (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    y = xc * inv
    out = Tensor(y, dtype=x.dtype)

    def bwd(g, acc):
        gm = g - g.mean(axis=-1, keepdims=True)
        acc(x, inv * (gm - y * (g * y).mean(axis=-1, keepdims=True)))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization (1-D, over columns of a [batch, features] matrix)

class BatchNormState:
    """Running statistics for inference mode."""

    def __init__(self, dim: int, momentum: float = 0.1, dtype=np.float32):
        self.mean = np.zeros(dim, dtype=dtype)
        self.var = np.ones(dim, dtype=dtype)
        self.momentum = momentum

    def update(self, mean, var):
        m = self.momentum
        self.mean = ((1.0 - m) * self.mean + m * mean).astype(self.mean.dtype)
        self.var = ((1.0 - m) * self.var + m * var).astype(self.var.dtype)

    def copy(self):
        fresh = BatchNormState(len(self.mean), self.momentum, self.mean.dtype)
        fresh.mean = self.mean.copy()
        fresh.var = self.var.copy()
        return fresh


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState | None = None,
                training: bool = True, eps: float = 1e-5) -> Tensor:
    """Column-standardize ``x`` then apply the affine (gamma, beta).

    Training mode uses batch statistics (population variance) and, when a
    ``state`` is supplied, folds them into the running statistics used by
    inference mode.
    """
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"batchnorm1d expects a 2-D input, got shape {x.shape}")
    n, d = xd.shape
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"batchnorm affine params must have shape ({d},), got {gamma.shape} and {beta.shape}")
    if training:
        if n < 2:
            raise ContractError("batchnorm1d needs batch size >= 2 in training mode (variance of one row is undefined)")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        if state is not None:
            state.update(mu, var)
    else:
        if state is None:
            raise ContractError("batchnorm1d inference mode needs running statistics")
        mu = state.mean.astype(xd.dtype)
        var = state.var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data, dtype=x.dtype)

    def bwd(g, acc):
        acc(gamma, (g * xhat).sum(axis=0))
        acc(beta, g.sum(axis=0))
        dxhat = g * gamma.data
        if training:
            acc(x, inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)))
        else:
            acc(x, dxhat * inv)

    return _record(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# matrix and lookup ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Leading batch dims must match exactly, or ``b`` is 2-D."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands: {a.shape} @ {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if ad.ndim == bd.ndim:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    elif bd.ndim != 2:
        raise ShapeError(f"matmul supports equal batch dims or a 2-D right operand: {a.shape} @ {b.shape}")
    out = Tensor(ad @ bd, dtype=a.dtype)

    def bwd(g, acc):
        acc(a, g @ np.swapaxes(bd, -1, -2))
        if bd.ndim == ad.ndim:
            acc(b, np.swapaxes(ad, -1, -2) @ g)
        else:
            k = ad.shape[-1]
            acc(b, ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))

    return _record(out, (a, b), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    idx = np.asarray(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise InputError(f"embedding ids must lie in [0, {table.shape[0]}), got range "
                         f"[{idx.min()}, {idx.max()}]")
    out = Tensor(table.data[idx], dtype=table.dtype)

    def bwd(g, acc):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        acc(table, gt)

    return _record(out, (table,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), dtype=x.dtype)

    def bwd(g, acc):
        acc(x, g.reshape(x.shape))

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(np.transpose(x.data, axes), dtype=x.dtype)

    def bwd(g, acc):
        acc(x, np.transpose(g, inv))

    return _record(out, (x,), bwd)


def select_token(x: Tensor, position: int) -> Tensor:
    """Slice one sequence position out of a [batch, seq, dim] tensor."""
    if x.data.ndim != 3:
        raise ShapeError(f"select_token expects a 3-D tensor, got shape {x.shape}")
    out = Tensor(x.data[:, position, :].copy(), dtype=x.dtype)

    def bwd(g, acc):
        gx = np.zeros_like(x.data)
        gx[:, position, :] = g
        acc(x, gx)

    return _record(out, (x,), bwd)


def take_labels(x: Tensor, labels) -> Tensor:
    """Pick ``x[i, labels[i]]`` per row of a [batch, classes] matrix."""
    lab = np.asarray(labels)
    n, c = x.shape
    if lab.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise InputError(f"labels must lie in [0, {c}), got range [{lab.min()}, {lab.max()}]")
    rows = np.arange(n)
    out = Tensor(x.data[rows, lab].copy(), dtype=x.dtype)

    def bwd(g, acc):
        gx = np.zeros_like(x.data)
        gx[rows, lab] = g
        acc(x, gx)

    return _record(out, (x,), bwd)


def logsumexp_rows(x: Tensor) -> Tensor:
    """Stable log-sum-exp over the last axis."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    soft = e / s
    out = Tensor((m + np.log(s)).squeeze(-1), dtype=x.dtype)

    def bwd(g, acc):
        acc(x, np.expand_dims(g, -1) * soft)

    return _record(out, (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    out = Tensor(np.asarray(x.data.sum()), dtype=x.dtype)

    def bwd(g, acc):
        acc(x, np.broadcast_to(g, x.shape))

    return _record(out, (x,), bwd)


def tmean(x: Tensor) -> Tensor:
    return affine(tsum(x), 1.0 / x.data.size, 0.0)


def straight_through(x: Tensor, values) -> Tensor:
    """Tensor carrying ``values`` whose gradient flows to ``x`` unchanged.

    Used to evaluate a stream at shifted parameter values (w + delta) while
    accumulating the gradient onto w itself; delta contributes no gradient.
    """
    vals = np.asarray(values, dtype=x.dtype)
    if vals.shape != x.data.shape:
        raise ShapeError(f"straight_through values shape {vals.shape} != tensor shape {x.shape}")
    out = Tensor(vals.copy(), dtype=x.dtype)

    def bwd(g, acc):
        acc(x, g)

    return _record(out, (x,), bwd)


def diag_part(x: Tensor) -> Tensor:
    """Diagonal of a square matrix as a vector."""
    d0, d1 = x.shape
    if d0 != d1:
        raise ShapeError(f"diag_part expects a square matrix, got shape {x.shape}")
    rows = np.arange(d0)
    out = Tensor(x.data[rows, rows].copy(), dtype=x.dtype)

    def bwd(g, acc):
        gx = np.zeros_like(x.data)
        gx[rows, rows] = g
        acc(x, gx)

    return _record(out, (x,), bwd)


def column_correlation(a: Tensor, b: Tensor) -> Tensor:
    """Un-centered column cross-correlation of two [batch, dim] matrices.

    Entry (i, j) is the inner product of column i of ``a`` with column j of
    ``b`` divided by the product of the two column norms. Columns with zero
    norm produce entries of exactly 0 (and zero gradient) instead of 0/0.
    """
    ad, bd = a.data, b.data
    if ad.ndim != 2 or ad.shape != bd.shape:
        raise ShapeError(f"column_correlation needs equal 2-D shapes, got {a.shape} and {b.shape}")
    num = ad.T @ bd
    p = np.sqrt((ad * ad).sum(axis=0))
    q = np.sqrt((bd * bd).sum(axis=0))
    ps = np.where(p > 0, p, 1.0).astype(ad.dtype)
    qs = np.where(q > 0, q, 1.0).astype(ad.dtype)
    mask = (p > 0)[:, None] & (q > 0)[None, :]
    corr = np.where(mask, num / np.outer(ps, qs), 0.0).astype(ad.dtype)
    out = Tensor(corr, dtype=a.dtype)

    def bwd(g, acc):
        gm = np.where(mask, g, 0.0).astype(ad.dtype)
        ga = gm * corr
        acc(a, (bd @ (gm / qs[None, :]).T) / ps[None, :] - ad * (ga.sum(axis=1) / (ps * ps))[None, :])
        acc(b, (ad @ (gm / ps[:, None])) / qs[None, :] - bd * (ga.sum(axis=0) / (qs * qs))[None, :])

    return _record(out, (a, b), bwd)
