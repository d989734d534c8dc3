"""Dense rank-2 arithmetic with a small reverse-mode tape.

Values are plain numpy arrays of shape (rows, cols). Only the primitives an
MLP-with-batch-norm branch and its adaptation losses need are provided; every
primitive records a vector-Jacobian product on the tape it was built on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BN_EPS = 1e-5
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class BatchTooSmallError(ValueError):
    pass


class EmptyTapeError(RuntimeError):
    pass


class Param:
    """An array owned by a model; `trainable` decides whether it gets a gradient."""

    __slots__ = ("data", "trainable", "name")

    def __init__(self, data, trainable: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.trainable = trainable
        self.name = name

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


@dataclass
class _Node:
    value: np.ndarray
    parents: tuple[int, ...]
    # vjp(g, needs) -> one gradient (or None) per parent; needs[i] says whether
    # parent i wants one
    vjp: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]] | None
    param: Param | None
    needs_grad: bool


class Var:
    """Handle to one value recorded on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "GradTape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass
class GradTape:
    nodes: list[_Node] = field(default_factory=list)

    def constant(self, value) -> Var:
        value = as_tensor(value)
        self.nodes.append(_Node(value, (), None, None, False))
        return Var(self, len(self.nodes) - 1)

    def param(self, p: Param) -> Var:
        self.nodes.append(_Node(p.data, (), None, p, p.trainable))
        return Var(self, len(self.nodes) - 1)

    def push(self, value: np.ndarray, parents: Sequence[Var], vjp) -> Var:
        for v in parents:
            if v.tape is not self:
                raise ValueError("operands recorded on different tapes")
        idx = tuple(v.index for v in parents)
        needs = any(self.nodes[i].needs_grad for i in idx)
        self.nodes.append(_Node(value, idx, vjp if needs else None, None, needs))
        return Var(self, len(self.nodes) - 1)


def as_tensor(x, dtype=None) -> np.ndarray:
    a = np.asarray(x, dtype=dtype)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"only rank-2 tensors are supported, got shape {a.shape}")
    return a


def backward(tape: GradTape, loss: Var, loss_grad: float = 1.0) -> dict[Param, np.ndarray]:
    """Propagate d(loss) back through `tape`.

    Returns a mapping from every trainable Param reached by the loss to its
    gradient. Frozen parameters are never given gradient storage.
    """
    if not tape.nodes:
        raise EmptyTapeError("backward called on an empty tape")
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")

    grads: dict[int, np.ndarray] = {loss.index: np.full_like(loss.value, loss_grad)}
    out: dict[Param, np.ndarray] = {}
    for i in range(loss.index, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        if node.param is not None:
            if node.param.trainable:
                if node.param in out:
                    out[node.param] = out[node.param] + g
                else:
                    out[node.param] = g
            continue
        if node.vjp is None:
            continue
        needs = tuple(tape.nodes[j].needs_grad for j in node.parents)
        for parent, want, pg in zip(node.parents, needs, node.vjp(g, needs)):
            if pg is None or not want:
                continue
            grads[parent] = grads[parent] + pg if parent in grads else pg
    return out


# --- primitives -------------------------------------------------------------


def linear(x: Var, W: Var, b: Var) -> Var:
    xv, Wv, bv = x.value, W.value, b.value
    if xv.shape[1] != Wv.shape[0] or bv.shape != (1, Wv.shape[1]):
        raise ShapeError(f"linear: x{xv.shape} @ W{Wv.shape} + b{bv.shape} do not conform")
    out = xv @ Wv + bv

    def vjp(g, needs):
        return (
            g @ Wv.T if needs[0] else None,
            xv.T @ g if needs[1] else None,
            g.sum(axis=0, keepdims=True) if needs[2] else None,
        )

    return x.tape.push(out, (x, W, b), vjp)


def relu(x: Var) -> Var:
    xv = x.value
    out = np.maximum(xv, xv.dtype.type(0))

    def vjp(g, needs):
        return (g * (xv > 0),)

    return x.tape.push(out, (x,), vjp)


def batchnorm(x: Var, bn, gamma: Var, beta: Var, batch_stats: bool, grad_through_stats: bool = True) -> Var:
    """Normalize columns of `x` then apply the affine transform.

    With `batch_stats` the column mean and biased std of `x` are computed and
    written into `bn.mu` / `bn.sigma`; otherwise the stored values are used.
    """
    xv = x.value
    n, d = xv.shape
    if bn.mu.shape[-1] != d:
        raise ShapeError(f"batchnorm: input width {d} != bn width {bn.mu.shape[-1]}")
    if batch_stats:
        if n < 2:
            raise BatchTooSmallError(f"batch statistics need at least 2 rows, got {n}")
        mu = xv.mean(axis=0, keepdims=True)
        var = ((xv - mu) ** 2).mean(axis=0, keepdims=True)
        sigma = np.sqrt(var + xv.dtype.type(BN_EPS))
        bn.mu = mu.astype(xv.dtype)
        bn.sigma = sigma.astype(xv.dtype)
    else:
        mu, sigma = bn.mu, bn.sigma
    xhat = (xv - mu) / sigma
    gv = gamma.value
    out = gv * xhat + beta.value
    full = batch_stats and grad_through_stats

    def vjp(g, needs):
        dxhat = g * gv
        if not needs[0]:
            dx = None
        elif full:
            dx = (dxhat - dxhat.mean(axis=0, keepdims=True) - xhat * (dxhat * xhat).mean(axis=0, keepdims=True)) / sigma
        else:
            dx = dxhat / sigma
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return x.tape.push(out, (x, gamma, beta), vjp)


def softmax_rows_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(z: Var) -> Var:
    p = softmax_rows_array(z.value)

    def vjp(g, needs):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return z.tape.push(p, (z,), vjp)


def average(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeError(f"average: {a.shape} vs {b.shape}")
    half = a.value.dtype.type(0.5)
    out = half * (a.value + b.value)
    return a.tape.push(out, (a, b), lambda g, needs: (half * g, half * g))


def add(*terms: Var) -> Var:
    out = terms[0].value
    for t in terms[1:]:
        out = out + t.value
    return terms[0].tape.push(out, terms, lambda g, needs: tuple(g for _ in terms))


def total(x: Var) -> Var:
    """Sum of all entries as a 1x1 value."""
    xv = x.value
    return x.tape.push(as_tensor(xv.sum()).astype(xv.dtype), (x,), lambda g, needs: (np.broadcast_to(g, xv.shape),))


def _safe_log(p):
    return np.log(np.maximum(p, p.dtype.type(LOG_FLOOR)))


def _floor_mask(p):
    return p > LOG_FLOOR


def mean_entropy(p: Var) -> Var:
    """Mean over rows of -sum_k p log p."""
    pv = p.value
    n = pv.shape[0]
    logp = _safe_log(pv)
    out = as_tensor(-(pv * logp).sum() / n).astype(pv.dtype)

    def vjp(g, needs):
        return (-g * (logp + _floor_mask(pv)) / n,)

    return p.tape.push(out, (p,), vjp)


def mean_symmetric_kl(p: Var, q: Var) -> Var:
    """Mean over rows of KL(p||q) + KL(q||p)."""
    pv, qv = p.value, q.value
    if pv.shape != qv.shape:
        raise ShapeError(f"symmetric kl: {pv.shape} vs {qv.shape}")
    n = pv.shape[0]
    lp, lq = _safe_log(pv), _safe_log(qv)
    out = as_tensor(((pv - qv) * (lp - lq)).sum() / n).astype(pv.dtype)

    def vjp(g, needs):
        mp, mq = _floor_mask(pv), _floor_mask(qv)
        dp = (lp - lq) + mp - qv / np.maximum(pv, LOG_FLOOR) * mp
        dq = (lq - lp) + mq - pv / np.maximum(qv, LOG_FLOOR) * mq
        return g * dp / n, g * dq / n

    return p.tape.push(out, (p, q), vjp)


def masked_nll(p: Var, labels: np.ndarray, valid: np.ndarray | None = None) -> Var:
    """Mean of -log p[label] over rows where `valid` holds."""
    pv = p.value
    n = pv.shape[0]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(-1)
    if labels.shape[0] != n or valid.shape[0] != n:
        raise ShapeError("masked_nll: labels/valid length must match rows")
    count = int(valid.sum())
    rows = np.nonzero(valid)[0]
    picked = pv[rows, labels[rows]]
    total = -_safe_log(picked).sum() / count if count else 0.0
    out = as_tensor(total).astype(pv.dtype)

    def vjp(g, needs):
        d = np.zeros_like(pv)
        if count:
            d[rows, labels[rows]] = -g.reshape(()) / (np.maximum(picked, LOG_FLOOR) * count) * (picked > LOG_FLOOR)
        return (d,)

    return p.tape.push(out, (p,), vjp)
