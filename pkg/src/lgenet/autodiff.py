"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations in this module build a
graph of parent links; :meth:`Tensor.backward` linearizes that graph into a
tape (topological order) and replays it in reverse, accumulating gradients
into every leaf that requires them.

Only the primitives the network needs are provided. All of them accept
arrays of either precision; the working precision is set by
:func:`set_default_dtype` (float32 for training, float64 for gradient checks).
"""
from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

_default_dtype = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the working precision."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """N-d array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def tape(self) -> list["Tensor"]:
        """Nodes reachable from ``self`` in topological order (inputs first)."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(self.tape()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)


class Parameter(Tensor):
    """Trainable leaf with a persistent gradient and momentum buffer."""

    __slots__ = ("name", "momentum_buffer")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.momentum_buffer = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.momentum_buffer = self.momentum_buffer.astype(dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return _node(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def log(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Natural log clamped below at ``eps``; clamped entries get zero gradient."""
    clamped = x.data < eps
    if clamped.any():
        logger.warning("log argument below %g at %d entries; clamped", eps, int(clamped.sum()))
    safe = np.where(clamped, eps, x.data)
    return _node(np.log(safe), (x,), lambda g: (np.where(clamped, 0.0, g / safe),), "log")


# -- reductions and shape ----------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return mul(sum_all(x), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _node(x.data.T, (x,), lambda g: (g.T,), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select a contiguous or arbitrary subset of rows (no shadow handling)."""
    rows = np.asarray(rows)
    n = x.shape[0]

    def backward(g):
        out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        np.add.at(out, rows, g)
        return (out,)

    return _node(x.data[rows], (x,), backward, "take_rows")


def take_elements(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``x[rows[k], cols[k]]`` for each k, as a 1-D tensor."""
    rows, cols = np.asarray(rows), np.asarray(cols)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _node(x.data[rows, cols], (x,), backward, "take_elements")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """2-D @ 2-D, or batched 3-D @ 3-D with equal batch size."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or ad.ndim != bd.ndim:
        raise ValueError(f"matmul shape error: {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape error: {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- neighborhood primitives -------------------------------------------------

def segment_sum(values: np.ndarray, index: np.ndarray, size: int) -> np.ndarray:
    """Rows of ``values`` summed into ``size`` buckets given by ``index``.

    A sparse 0/1 matrix product; much faster than ``np.add.at`` and with a
    fixed summation order.
    """
    flat = values.reshape(len(values), -1)
    picker = sparse.csr_matrix(
        (np.ones(len(index), dtype=values.dtype), (index, np.arange(len(index)))),
        shape=(size, len(index)))
    return np.asarray(picker @ flat, dtype=values.dtype).reshape((size,) + values.shape[1:])


def sparse_matmul(matrix: sparse.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a 2-D tensor."""
    matrix = sparse.csr_matrix(matrix)
    if matrix.shape[1] != x.shape[0] or x.ndim != 2:
        raise ValueError(f"sparse_matmul shape error: {matrix.shape} @ {x.shape}")
    transposed = matrix.T.tocsr()

    def backward(g):
        return (np.asarray(transposed @ g, dtype=g.dtype),)

    return _node(np.asarray(matrix @ x.data, dtype=x.dtype), (x,), backward, "sparse_matmul")


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows of ``x`` at ``index`` (any shape); index ``len(x)`` is the shadow row.

    The shadow row is all zeros in the forward pass and its gradient is
    dropped, so padded neighbors contribute nothing either way.
    """
    index = np.asarray(index)
    n = x.shape[0]
    padded = np.concatenate([x.data, np.zeros((1,) + x.shape[1:], dtype=x.dtype)], axis=0)
    out = padded[index]

    def backward(g):
        return (segment_sum(g.reshape((-1,) + x.shape[1:]), index.reshape(-1), n + 1)[:n],)

    return _node(out, (x,), backward, "gather")


def scatter_mean(x: Tensor, index: np.ndarray, size: int) -> Tensor:
    """Mean of the rows of ``x`` grouped by ``index`` into ``size`` buckets.

    Empty buckets yield zero rows.
    """
    index = np.asarray(index, dtype=np.int64)
    counts = np.bincount(index, minlength=size).astype(x.dtype)
    inv = np.zeros_like(counts)
    np.divide(1.0, counts, out=inv, where=counts > 0)
    out = segment_sum(x.data, index, size)
    out *= inv.reshape((-1,) + (1,) * (x.ndim - 1))

    def backward(g):
        return ((g * inv.reshape((-1,) + (1,) * (g.ndim - 1)))[index],)

    return _node(out, (x,), backward, "scatter_mean")


# -- normalization and probabilities -----------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by max subtraction."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2-D tensor, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _node(s, (x,), backward, "softmax_rows")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.98,
               eps: float = 1e-6, batch_stats: bool | None = None) -> Tensor:
    """Batch normalization over the point axis of an N x C tensor.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    ``batch_stats`` (default: ``training``) normalizes with the statistics
    of ``x`` itself, also outside training.
    """
    xd = x.data
    if batch_stats is None:
        batch_stats = training
    if batch_stats:
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        if training:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = xhat * gamma.data + beta.data
    n = xd.shape[0]

    def backward(g):
        ggamma = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        gxhat = g * gamma.data
        if batch_stats:
            gx = inv_std / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return _node(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


# -- training utilities ------------------------------------------------------

def compute_class_weights(counts: Sequence[float]) -> np.ndarray:
    """Inverse-frequency class weights normalized to sum to one."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a non-empty 1-D sequence")
    if (counts <= 0).any():
        missing = np.flatnonzero(counts <= 0).tolist()
        raise ValueError(
            f"classes {missing} have no points; drop them from the manifest "
            "or floor their counts before computing weights")
    proportion = counts / counts.sum()
    inv = 1.0 / proportion
    return inv / inv.sum()


def weighted_cross_entropy(probs: Tensor, labels: np.ndarray, weights: Sequence[float],
                           form: str = "categorical", ignore_label: int = 255,
                           eps: float = 1e-12) -> Tensor:
    """Class-weighted cross-entropy of row-stochastic ``probs``, mean over points.

    ``form="categorical"`` gives ``-w_y log p_y``. ``form="binary"`` sums the
    per-class binary terms ``-w_c [y log p + (1-y) log(1-p)]`` over classes.
    Points labeled ``ignore_label`` are excluded.
    """
    labels = np.asarray(labels)
    n, c = probs.shape
    valid = labels != ignore_label
    if not valid.any():
        raise ValueError("no labeled points in batch")
    w = np.asarray(weights, dtype=probs.dtype)
    if w.shape != (c,):
        raise ValueError(f"expected {c} class weights, got {w.shape}")
    if labels[valid].min() < 0 or labels[valid].max() >= c:
        raise ValueError("label out of range")
    rows = np.flatnonzero(valid)
    y = labels[rows].astype(np.int64)
    m = rows.size
    if form == "categorical":
        picked = take_elements(probs, rows, y)
        return sum_all(mul(log(picked, eps), -w[y] / m))
    if form == "binary":
        picked = gather(probs, rows)
        onehot = np.zeros((m, c), dtype=probs.dtype)
        onehot[np.arange(m), y] = 1.0
        pos = mul(log(picked, eps), -(onehot * w) / m)
        neg = mul(log(sub(1.0, picked), eps), -((1.0 - onehot) * w) / m)
        return add(sum_all(pos), sum_all(neg))
    raise ValueError(f"unknown loss form {form!r}")


def learning_rate(epoch: int, base: float = 1e-3, decay: float = 0.9, every: int = 5) -> float:
    """Step schedule: ``base * decay ** (epoch // every)``."""
    return base * decay ** (epoch // every)


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9) -> None:
    """Classical momentum update ``v = mu v + g; w -= lr v``.

    Every gradient is validated before any parameter is touched, so a
    non-finite gradient leaves the model unchanged.
    """
    params = list(params)
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in parameter {p.name or p!r}")
    for p in params:
        p.momentum_buffer *= momentum
        p.momentum_buffer += p.grad
        p.data -= lr * p.momentum_buffer


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# -- verification ------------------------------------------------------------

class GradientCheckError(AssertionError):
    pass


def finite_difference_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                            eps: float = 1e-6, tolerance: float | None = 1e-5,
                            max_coords: int | None = None, seed: int = 0,
                            floor: float = 1e-3) -> float:
    """Compare tape gradients of ``fn`` with central differences.

    ``fn`` is re-evaluated with each checked coordinate of each input nudged
    by +-eps. Non-scalar outputs are contracted with a fixed random
    projection first. The per-coordinate error is
    ``|a - n| / max(|a|, |n|, floor * max|a|)``; the floor keeps coordinates
    that are negligible next to the overall gradient from being judged on
    round-off alone. Returns the largest error; raises
    :class:`GradientCheckError` naming the worst coordinate if it exceeds
    ``tolerance``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("finite_difference_check requires 64-bit inputs")
    rng = np.random.default_rng(seed)
    probe = fn()
    projection = None if probe.data.size == 1 else rng.standard_normal(probe.shape)

    def scalar() -> Tensor:
        out = fn()
        return out if projection is None else sum_all(mul(out, projection))

    saved = [t.grad for t in inputs]
    saved_flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.grad = np.zeros_like(t.data)
        t.requires_grad = True
    try:
        scalar().backward()
        analytic = [t.grad.copy() for t in inputs]
        coords: list[tuple[int, tuple[int, ...]]] = []
        for i, t in enumerate(inputs):
            flat = np.arange(t.data.size)
            if max_coords is not None and flat.size > max_coords:
                flat = rng.choice(flat, size=max_coords, replace=False)
            coords.extend((i, np.unravel_index(k, t.shape)) for k in flat)
        numeric = []
        for i, idx in coords:
            t = inputs[i]
            orig = t.data[idx]
            t.data[idx] = orig + eps
            fp = float(scalar().data)
            t.data[idx] = orig - eps
            fm = float(scalar().data)
            t.data[idx] = orig
            numeric.append((fp - fm) / (2 * eps))
    finally:
        for t, g, flag in zip(inputs, saved, saved_flags):
            t.grad = g
            t.requires_grad = flag
    a = np.array([analytic[i][idx] for i, idx in coords])
    n = np.array(numeric)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max())
    denom = np.maximum.reduce([np.abs(a), np.abs(n), np.full_like(a, floor * scale)])
    err = np.zeros_like(a)
    np.divide(np.abs(a - n), denom, out=err, where=denom > 0)
    worst = int(err.argmax())
    max_err = float(err[worst])
    if tolerance is not None and max_err > tolerance:
        i, idx = coords[worst]
        raise GradientCheckError(
            f"input {i} coordinate {tuple(int(j) for j in idx)}: analytic={a[worst]:.10g} "
            f"numeric={n[worst]:.10g} relative error={max_err:.3g} > {tolerance:g}")
    return max_err
