"""Dense tensors with reverse-mode automatic differentiation.

Row-major numpy arrays are the storage; every differentiable operation
records its inputs and a local gradient rule so that ``backward`` on a
scalar loss fills the ``grad`` buffer of every requires-grad leaf.

Shapes are checked at op boundaries and there is no implicit
broadcasting, with two deliberate exceptions: a scalar may combine with
a tensor, and ``add_bias`` adds a 1-D vector along the last axis.

All op outputs are checked for NaN/Inf unless the check is switched off
via ``set_finite_checks(False)``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class TensorError(Exception):
    """Base error for tensor operations."""


class ShapeError(TensorError):
    """Operands have incompatible shapes."""


class NonFiniteError(TensorError):
    """An operation produced NaN or Inf."""


_DEFAULT_DTYPE = np.dtype(np.float32)
_FINITE_CHECKS = True
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors are created with (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TensorError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (e.g. float64 for grad checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def set_finite_checks(enabled: bool) -> None:
    """Enable or disable the NaN/Inf assertion on op outputs."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Suppress graph recording (inference paths)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


def _assert_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in output of {op}")


class Tensor:
    """A dense real-valued array, optionally tracked for gradients.

    ``grad`` is filled (and accumulated across repeated ``backward``
    calls) only for leaves created with ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        _assert_finite(self.data, "tensor creation")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable] = None
        self._op = "leaf"

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar, accumulating grads on leaves."""
        if self.size != 1:
            raise TensorError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                # requires-grad leaf: accumulate
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    def sum(self) -> "Tensor":
        return sum_all(self)

    # operator sugar; scalar operands are allowed
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list:
    """Iterative post-order over the op graph; each node appears once."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), requires_grad=False, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable) -> Tensor:
    """Wrap an op result; record the graph edge only if a parent needs grad."""
    _assert_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to a scalar operand's shape."""
    return np.sum(g).reshape(shape).astype(g.dtype)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (only scalar broadcast allowed)")
    data = a.data + b.data

    def backward(g):
        ga = _reduce_to(g, a.shape) if a.shape != data.shape else g
        gb = _reduce_to(g, b.shape) if b.shape != data.shape else g
        return ga, gb

    return _node(data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (only scalar broadcast allowed)")
    data = a.data * b.data

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if a.shape != data.shape:
            ga = _reduce_to(ga, a.shape)
        if b.shape != data.shape:
            gb = _reduce_to(gb, b.shape)
        return ga, gb

    return _node(data, (a, b), "mul", backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _node(data, (x,), "relu", backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise TensorError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p)
    scale = 1.0 / (1.0 - p)
    mask = keep.astype(x.dtype) * scale
    data = x.data * mask

    def backward(g):
        return (g * mask,)

    return _node(data, (x,), "dropout", backward)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _node(data, (x,), "sum", backward)


# ---------------------------------------------------------------------------
# shape ops

def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(data, (x,), "reshape", backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    data = np.ascontiguousarray(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _node(data, (x,), "transpose", backward)


def swap_last_axes(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TensorError(f"gather_rows: id out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _node(data, (table,), "gather_rows", backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: (m,k)@(k,n); batched (..,m,k)@(k,n) against a shared
    right operand; and fully batched (..,m,k)@(..,k,n) with equal batch dims.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        pass
    elif a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
    data = a.data @ b.data
    k, n = b.shape[-2], b.shape[-1]

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: sum gradient over batch dims
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(data, (a, b), "matmul", backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of x."""
    x = _as_tensor(x)
    b = _as_tensor(b)
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not match last axis of {x.shape}")
    data = x.data + b.data

    def backward(g):
        gb = g.reshape(-1, b.shape[0]).sum(axis=0)
        return g, gb

    return _node(data, (x, b), "add_bias", backward)


# ---------------------------------------------------------------------------
# normalization and loss

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; slices along ``axis`` sum to 1."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _node(data, (x,), "softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Uses the population variance (denominator N).
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must both be ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = (dxhat - m1 - xhat * m2) * inv
        return gx, ggain, gbias

    return _node(data, (x, gain, bias), "layer_norm", backward)


def cross_entropy_smoothed(logits: Tensor, targets, smoothing: float,
                           pad_id: int) -> Tensor:
    """Label-smoothed cross entropy, averaged over non-pad positions.

    The target distribution places 1 - smoothing on the gold id and
    spreads the remaining mass uniformly over the vocabulary excluding
    the gold id and the pad id. Pad positions are excluded from the mean.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_smoothed: logits must be 2-D, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    positions, vocab = logits.shape
    if targets.shape != (positions,):
        raise ShapeError(
            f"cross_entropy_smoothed: {positions} positions but {targets.shape} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TensorError(f"cross_entropy_smoothed: target id out of range [0, {vocab})")
    if not 0.0 <= smoothing < 1.0:
        raise TensorError(f"smoothing must be in [0, 1), got {smoothing}")
    if smoothing > 0.0 and vocab < 3:
        raise TensorError("smoothing requires vocabulary size >= 3")

    nonpad = targets != pad_id
    count = int(nonpad.sum())
    if count == 0:
        raise TensorError("no non-pad targets")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz

    rows = np.nonzero(nonpad)[0]
    gold = targets[rows]
    gold_lp = logp[rows, gold]
    if smoothing == 0.0:
        per_pos = -gold_lp
    else:
        rest = logp[rows].sum(axis=1) - gold_lp - logp[rows, pad_id]
        per_pos = -((1.0 - smoothing) * gold_lp + smoothing / (vocab - 2) * rest)
    data = np.asarray(per_pos.sum() / count, dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        q = np.zeros_like(p)
        if smoothing > 0.0:
            q[rows] = smoothing / (vocab - 2)
            q[rows, pad_id] = 0.0
        q[rows, gold] = 1.0 - smoothing
        grad = np.zeros_like(p)
        grad[rows] = (p[rows] - q[rows]) * (float(g) / count)
        return (grad,)

    return _node(data, (logits,), "cross_entropy_smoothed", backward)


# ---------------------------------------------------------------------------
# gradient checking

def finite_difference_gradient(fn: Callable[[], Tensor], leaf: Tensor,
                               step: Optional[float] = None) -> np.ndarray:
    """Central finite differences of the scalar fn() w.r.t. every leaf entry.

    ``fn`` must rebuild its graph from ``leaf`` on each call; the leaf is
    perturbed in place and restored. Step defaults to 1e-4 in float64 and
    3e-2 in float32 (forward-pass roundoff dominates below that).
    """
    if step is None:
        step = 1e-4 if leaf.dtype == np.float64 else 3e-2
    flat = leaf.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn().item()
        flat[i] = orig - step
        lo = fn().item()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(leaf.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(|n_i|, 1); absolute below unit scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(numeric), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
