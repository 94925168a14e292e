"""Dense float64 arrays with reverse-mode automatic differentiation.

A deliberately small op set, just enough for a compact transformer and its
training losses: matmul, softmax family, layer norm, embedding lookup,
elementwise math, and gather/slice ops for token-level loss masking.

Mechanics: every op that touches a gradient-bearing tensor appends itself to
the implicit tape formed by ``Tensor._parents`` / ``Tensor._backward``;
``backward`` replays that record once in reverse topological order and
accumulates (+=) gradients on fan-out. Tensors never store NaN/Inf; every op
boundary checks and raises ``InvalidValue`` instead of propagating poison.

Broadcasting is restricted to leading-dimension expansion: operand shapes
must be equal, or the smaller shape must be a suffix of the larger one.
Anything else needs an explicit ``reshape``. All storage is row-major
float64; speed is irrelevant at the scale this package targets, gradient
checks are not.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from degenlab.errors import ContractViolation, InvalidValue

__all__ = [
    "Tensor",
    "add",
    "backward",
    "concat_rows",
    "detach",
    "dropout",
    "embedding",
    "exp",
    "gelu",
    "layer_norm",
    "log",
    "log_softmax",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "pow_const",
    "reshape",
    "slice_rows",
    "softmax",
    "sub",
    "take_at",
    "take_per_row",
    "tensor_sum",
    "transpose",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidValue(f"{op}: non-finite value encountered")


class Tensor:
    """A dense float64 array plus the backward closure that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; scalars are wrapped into constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_suffix_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, large = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if small != large[len(large) - len(small):]:
        raise ContractViolation(
            f"{op}: shapes {sa} and {sb} only broadcast via leading-dimension expansion"
        )


def _reduce_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast(a.data, b.data, "add")
    out = a.data + b.data

    def bwd(g):
        return _reduce_to_shape(g, a.data.shape), _reduce_to_shape(g, b.data.shape)

    return _make(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast(a.data, b.data, "sub")
    out = a.data - b.data

    def bwd(g):
        return _reduce_to_shape(g, a.data.shape), -_reduce_to_shape(g, b.data.shape)

    return _make(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast(a.data, b.data, "mul")
    out = a.data * b.data
    da, db = a.data, b.data

    def bwd(g):
        return (
            _reduce_to_shape(g * db, da.shape),
            _reduce_to_shape(g * da, db.shape),
        )

    return _make(out, (a, b), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    da = a.data

    def bwd(g):
        return (g / da,)

    return _make(out, (a,), bwd, "log")


def pow_const(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent; p == 0 is the constant 1."""
    if p == 0.0:
        out = np.ones_like(a.data)
        return _make(out, (a,), lambda g: (np.zeros_like(a.data),), "pow_const")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** p
    da = a.data

    def bwd(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * p * da ** (p - 1.0),)

    return _make(out, (a,), bwd, "pow_const")


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), bwd, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum() / n)

    def bwd(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _make(out, (a,), bwd, "mean")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractViolation("matmul: operands must have >= 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ContractViolation(
            f"matmul: inner dimensions differ ({a.data.shape} @ {b.data.shape})"
        )
    if a.data.ndim != b.data.ndim and min(a.data.ndim, b.data.ndim) != 2:
        raise ContractViolation(
            "matmul: stacked operands must share leading dimensions (or one side is 2-D)"
        )
    if a.data.ndim == b.data.ndim and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ContractViolation("matmul: leading (batch) dimensions differ")
    out = np.matmul(a.data, b.data)
    da, db = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(db, -1, -2))
        gb = np.matmul(np.swapaxes(da, -1, -2), g)
        return _reduce_to_shape(ga, da.shape), _reduce_to_shape(gb, db.shape)

    return _make(out, (a, b), bwd, "matmul")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), bwd, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _make(out, (a,), bwd, "reshape")


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 0; trailing shapes must match."""
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ContractViolation("concat_rows: trailing shapes differ")
    out = np.concatenate([a.data, b.data], axis=0)
    na = a.data.shape[0]

    def bwd(g):
        return g[:na], g[na:]

    return _make(out, (a, b), bwd, "concat_rows")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[start:stop].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make(out, (a,), bwd, "slice_rows")


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def bwd(g):
        dens = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * dens),)

    return _make(out, (a,), bwd, "gelu")


def log_softmax(a: Tensor) -> Tensor:
    """Row-normalized log probabilities along the last axis.

    Stable via max subtraction; every output row satisfies logsumexp == 0.
    """
    x = a.data
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ContractViolation("log_softmax: need at least one column")
    _check_finite(x, "log_softmax input")
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bwd(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bwd, "log_softmax")


def softmax(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), bwd, "softmax")


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where mask is True.

    Masked positions get weight exactly 0.0, so downstream values cannot leak
    through them even at the bit level. The mask is a plain boolean array
    (it never enters the tape), and every row must keep at least one
    unmasked position.
    """
    x = a.data
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise ContractViolation("masked_softmax: a row is fully masked")
    neg_inf = np.where(mask, x, -np.inf)
    m = neg_inf.max(axis=-1, keepdims=True)
    e = np.exp(neg_inf - m)  # exp(-inf) == 0.0 exactly at masked positions
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), bwd, "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ContractViolation("layer_norm: gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data
    g_data = gain.data

    def bwd(g):
        dxhat = g * g_data
        # Standard layer-norm backward collapsed into one expression.
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), bwd, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractViolation("embedding: index out of range")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), bwd, "embedding")


def take_per_row(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[t] = a[t, idx[t]] for a 2-D tensor; the loss-gather primitive."""
    if a.data.ndim != 2:
        raise ContractViolation("take_per_row: expected a 2-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    rows = a.data.shape[0]
    if idx.shape != (rows,):
        raise ContractViolation("take_per_row: index length must equal row count")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise ContractViolation("take_per_row: column index out of range")
    r = np.arange(rows)
    out = a.data[r, idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[r, idx] = g
        return (full,)

    return _make(out, (a,), bwd, "take_per_row")


def take_at(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """General 2-D gather out[i] = a[rows[i], cols[i]] with scatter-add backward."""
    if a.data.ndim != 2:
        raise ContractViolation("take_at: expected a 2-D tensor")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape:
        raise ContractViolation("take_at: row/col index shapes differ")
    out = a.data[rows, cols]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _make(out, (a,), bwd, "take_at")


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; rate == 0 is the identity and consumes no rng draws."""
    if not 0.0 <= rate < 1.0:
        raise ContractViolation("dropout: rate must lie in [0, 1)")
    if rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out = a.data * keep

    def bwd(g):
        return (g * keep,)

    return _make(out, (a,), bwd, "dropout")


def detach(a: Tensor) -> Tensor:
    """A view of the same values with no tape history."""
    return Tensor(a.data)


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    The recorded ops are replayed exactly once each, in reverse topological
    order; fan-out contributions accumulate with +=.
    """
    if loss.data.shape != ():
        raise ContractViolation("backward: loss must be a scalar")
    # Iterative post-order traversal (training graphs can be deep).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
