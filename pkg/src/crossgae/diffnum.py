"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every forward primitive records ``(inputs, output, backward_rule)`` onto the
active :class:`Tape` when at least one input requires a gradient.
:func:`backward` then walks the tape in exact reverse recording order and
accumulates gradients into leaves.

Values are always 64-bit and always two-dimensional; scalars are ``1 x 1``.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; records made inside the block land on this tape.
    """

    def __init__(self):
        self.records: list[tuple[tuple[Tensor, ...], Tensor, BackwardRule]] = []

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def clear(self) -> None:
        self.records.clear()


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = [Tape()]
    return _local.stack


def active_tape() -> Tape:
    return _stack()[-1]


class no_grad:
    """Suspend recording; results never require gradients."""

    def __enter__(self):
        _local.no_grad = getattr(_local, "no_grad", 0) + 1

    def __exit__(self, *exc):
        _local.no_grad -= 1


def _recording() -> bool:
    return getattr(_local, "no_grad", 0) == 0


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    return arr


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], rule: BackwardRule, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _finite(value, op)
    out.name = None
    out.grad = None
    needs = _recording() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out._is_leaf = not needs
    if needs:
        active_tape().records.append((inputs, out, rule))
    return out


def apply_op(value: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule, op: str = "custom") -> Tensor:
    """Record a fused primitive defined outside this module.

    ``rule(g)`` receives the upstream gradient (same shape as ``value``) and
    returns one gradient (or ``None``) per input.
    """
    value = np.asarray(value, dtype=np.float64)
    if value.ndim != 2:
        raise ShapeError(f"{op}: output must be 2-D")
    return _emit(value, tuple(inputs), rule, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# primitives -----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    av, bv = a.data, b.data

    def rule(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _emit(av @ bv, (a, b), rule, "matmul")


def transpose(a: Tensor) -> Tensor:
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    av, bv = a.data, b.data

    def rule(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return _emit(av * bv, (a, b), rule, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function without overflow for large ``|x|``."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = stable_sigmoid(a.data)
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _emit(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def power(a: Tensor, p: float) -> Tensor:
    av = a.data
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        value = av ** p
    return _emit(value, (a,), lambda g: (g * p * av ** (p - 1.0),), "power")


def abs_(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def elementwise(op: str, *args, **kw) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, sigmoid, tanh, relu, neg."""
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale, "sigmoid": sigmoid,
             "tanh": tanh, "relu": relu, "neg": neg, "power": power, "abs": abs_}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kw)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _emit(np.array([[a.data.sum()]]), (a,),
                     lambda g: (np.full(shape, g[0, 0]),), "sum")
    v = a.data.sum(axis=axis, keepdims=True)
    return _emit(v, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / count)


def max_rows(a: Tensor) -> Tensor:
    """Column-wise max over rows (``n x d -> 1 x d``); ties route to the first row."""
    idx = np.argmax(a.data, axis=0)
    cols = np.arange(a.shape[1])
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        out[idx, cols] = g[0]
        return (out,)

    return _emit(a.data[idx, cols][None, :].copy(), (a,), rule, "max_rows")


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ {a.shape} vs {b.shape}")
    k = a.shape[1]
    return _emit(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :k], g[:, k:]), "concat_cols")


def reshape(a: Tensor, shape: tuple[int, int]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation followed by an affine map."""
    xv = x.data
    d = xv.shape[1]
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.data

    def rule(g):
        gx = gy = gb = None
        if x.requires_grad:
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        if gain.requires_grad:
            gy = (g * xhat).sum(axis=0, keepdims=True)
        if bias.requires_grad:
            gb = g.sum(axis=0, keepdims=True)
        return gx, gy, gb

    if gain.shape != (1, d) or bias.shape != (1, d):
        raise ShapeError(f"layer_norm: gain/bias must be 1x{d}")
    return _emit(xhat * gv + bias.data, (x, gain, bias), rule, "layer_norm")


def _check_idx(idx, n: int, op: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{op}: index out of range for {n} rows")
    return idx


def row_gather(x: Tensor, idx) -> Tensor:
    idx = _check_idx(idx, x.shape[0], "row_gather")
    shape = x.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(x.data[idx].copy(), (x,), rule, "row_gather")


def row_scatter(x: Tensor, idx, n: int) -> Tensor:
    idx = _check_idx(idx, n, "row_scatter")
    if idx.size != x.shape[0]:
        raise ShapeError(f"row_scatter: {idx.size} indices for {x.shape[0]} rows")
    if np.unique(idx).size != idx.size:
        raise ValueError("row_scatter: duplicate index")
    out = np.zeros((n, x.shape[1]))
    out[idx] = x.data
    return _emit(out, (x,), lambda g: (g[idx].copy(),), "row_scatter")


def pairwise_sq_dist(p: Tensor, q: Tensor) -> Tensor:
    """``D[i, j] = ||p_i - q_j||^2``."""
    if p.shape[1] != q.shape[1]:
        raise ShapeError("pairwise_sq_dist: embedding dims differ")
    pv, qv = p.data, q.data
    diff = pv[:, None, :] - qv[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)

    def rule(g):
        gp = 2.0 * (g.sum(axis=1, keepdims=True) * pv - g @ qv) if p.requires_grad else None
        gq = 2.0 * (g.sum(axis=0)[:, None] * qv - g.T @ pv) if q.requires_grad else None
        return gp, gq

    return _emit(dist, (p, q), rule, "pairwise_sq_dist")


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Softmax cross-entropy of a ``1 x C`` logit row against a class index."""
    z = logits.data[0]
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    prob = np.exp(z - lse)

    def rule(g):
        grad = prob.copy()
        grad[target] -= 1.0
        return (g[0, 0] * grad[None, :],)

    return _emit(np.array([[lse - z[target]]]), (logits,), rule, "cross_entropy")


# differentiation -------------------------------------------------------------

def backward(root: Tensor, tape: Tape | None = None, wrt: Sequence[Tensor] | None = None) -> None:
    """Accumulate d(root)/d(leaf) into every ``requires_grad`` leaf's ``grad``.

    With ``wrt`` only those leaves are written, which keeps shared parameters
    untouched when several threads differentiate through the same model.
    """
    if root.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar root, got {root.shape}")
    tape = tape if tape is not None else active_tape()
    if not root.requires_grad:
        return
    only = None if wrt is None else {id(t) for t in wrt}
    grads: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for inputs, out, rule in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, rule(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._is_leaf:
                if only is not None and id(t) not in only:
                    continue
                t.grad = t.grad + gi if t.grad is not None else gi.copy()
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    if tape is _stack()[0]:
        tape.clear()


def finite_difference_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5,
                            floor: float = 1e-8) -> float:
    """Max entrywise relative error between tape gradient and central differences.

    ``f`` maps a tensor to a scalar tensor. Entries whose absolute discrepancy
    is below ``floor`` count as exact. Inputs sitting on a relu kink should be
    nudged by the caller first.
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
        backward(y, tape)
    analytic = xt.grad
    numeric = np.zeros_like(x)
    with no_grad():
        for i in np.ndindex(x.shape):
            xp = x.copy()
            xp[i] += h
            xm = x.copy()
            xm[i] -= h
            numeric[i] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * h)
    err = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.where(err < floor, 0.0, err / denom)
    return float(rel.max()) if rel.size else 0.0
