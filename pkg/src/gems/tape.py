"""Array-level reverse-mode differentiation.

A ``GradientTape`` records each operation as it runs, together with a closure
mapping the output adjoint to the adjoints of its inputs. ``backward`` replays
the records in reverse. Dropout masks are ordinary constants fed into the
recorded ops, so a forward pass replayed with the same step seed sees the same
masks.

Only the operations the encoder and decoder need are provided; each adjoint is
written out by hand.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import TapeMismatch
from .graph import Csr


class Tensor:
    __slots__ = ("value", "parents", "adjoint_fn", "tape", "name", "requires_grad")

    def __init__(self, value, tape: "GradientTape", parents=(), adjoint_fn=None, name=None,
                 requires_grad=False):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.adjoint_fn = adjoint_fn
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.value.shape})"


class GradientTape:
    """Records differentiable operations; ``record=False`` computes values only."""

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, self, name=name, requires_grad=self.record)
        self.leaves[name] = t
        return t

    def const(self, value) -> Tensor:
        return Tensor(np.asarray(value), self)

    def op(self, value, parents: Sequence[Tensor], adjoint_fn: Callable) -> Tensor:
        needs = self.record and any(p.requires_grad for p in parents)
        t = Tensor(value, self, tuple(parents) if needs else (), adjoint_fn if needs else None,
                   requires_grad=needs)
        if needs:
            self.nodes.append(t)
        return t


def backward(tape: GradientTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of scalar ``loss`` with respect to every named parameter on ``tape``.

    Parameters the loss does not depend on get exact zeros.
    """
    if loss.tape is not tape:
        raise TapeMismatch("loss was not recorded on this tape")
    if not tape.record:
        raise TapeMismatch("tape was created with record=False")
    if np.ndim(loss.value) != 0:
        raise TapeMismatch("backward needs a scalar loss")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        grads = node.adjoint_fn(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
    out = {}
    for name, leaf in tape.leaves.items():
        g = adj.get(id(leaf))
        out[name] = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=leaf.value.dtype).reshape(leaf.value.shape)
    return out


# ---------------------------------------------------------------------------
# elementwise and dense ops


def add(*xs: Tensor) -> Tensor:
    value = xs[0].value.copy()
    for x in xs[1:]:
        value = value + x.value
    return xs[0].tape.op(value, xs, lambda g: tuple(g for _ in xs))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.op(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def scale(x: Tensor, c: float) -> Tensor:
    return x.tape.op(x.value * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    return x.tape.op(np.asarray(x.value.sum()), (x,), lambda g: (np.full_like(x.value, g),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.value.shape
    return x.tape.op(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    n = a.value.shape[0]
    return a.tape.op(np.concatenate([a.value, b.value], axis=0), (a, b), lambda g: (g[:n], g[n:]))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w.T (+ b), with w shaped (out, in)."""
    value = x.value @ w.value.T
    if b is None:
        return x.tape.op(value, (x, w), lambda g: (g @ w.value, g.T @ x.value))
    value = value + b.value
    return x.tape.op(value, (x, w, b), lambda g: (g @ w.value, g.T @ x.value, g.sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    keep = x.value > 0
    return x.tape.op(np.where(keep, x.value, 0.0), (x,), lambda g: (g * keep,))


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    factor = np.where(x.value > 0, 1.0, slope)
    return x.tape.op(x.value * factor, (x,), lambda g: (g * factor,))


def exp(x: Tensor) -> Tensor:
    value = np.exp(x.value)
    return x.tape.op(value, (x,), lambda g: (g * value,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Row-wise normalisation over the feature axis with learnable scale/shift."""
    v = x.value
    d = v.shape[1]
    mu = v.mean(axis=1, keepdims=True)
    xc = v - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv_std
    value = xhat * gamma.value + beta.value

    def adjoint(g):
        dxhat = g * gamma.value
        dx = inv_std / d * (d * dxhat - dxhat.sum(axis=1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return x.tape.op(value, (x, gamma, beta), adjoint)


def dropout(x: Tensor, keep_mask: Optional[np.ndarray], rate: float) -> Tensor:
    """Inverted dropout with a precomputed boolean keep mask; None is identity."""
    if keep_mask is None or rate == 0.0:
        return x
    factor = keep_mask / (1.0 - rate)
    return x.tape.op(x.value * factor, (x,), lambda g: (g * factor,))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """x / max(||x||_2, eps) per row."""
    v = x.value
    norm = np.sqrt((v * v).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = v / denom
    live = norm > eps

    def adjoint(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return (np.where(live, (g - y * proj) / denom, g / eps),)

    return x.tape.op(y, (x,), adjoint)


def head_dot(x: Tensor, a: Tensor) -> Tensor:
    """Per-head score <x[n, h], a[h]> for x (n, H, F) and a (H, F)."""
    value = np.einsum("nhf,hf->nh", x.value, a.value)
    return x.tape.op(value, (x, a), lambda g: (g[:, :, None] * a.value[None], np.einsum("nh,nhf->hf", g, x.value)))


# ---------------------------------------------------------------------------
# sparse ops


def spmm(csr: Csr, weights, x: Tensor) -> Tensor:
    """Weighted neighbour sum: out[w, h] = sum_j weights[j, h] * x[src_j, h].

    ``weights`` is a constant (nnz, H) array or a Tensor; ``x`` is (n_src, H, F).
    """
    w_t = weights if isinstance(weights, Tensor) else None
    w = w_t.value if w_t is not None else weights
    value = kernels.spmm(csr.indptr, csr.indices, w, x.value, csr.n_rows)

    def adjoint(g):
        t, perm = csr.transposed
        dx = kernels.spmm(t.indptr, t.indices, w[perm], g, t.n_rows)
        if w_t is None:
            return (dx,)
        return dx, kernels.sddmm(csr.indptr, csr.indices, g, x.value)

    parents = (x,) if w_t is None else (x, w_t)
    return x.tape.op(value, parents, adjoint)


def mean_aggregate(csr: Csr, x: Tensor) -> Tensor:
    """Mean over each row's neighbours of x (n_src, F); empty rows give zeros."""
    n, f = x.value.shape
    out = spmm(csr, csr.mean_weights.astype(x.value.dtype), reshape(x, (n, 1, f)))
    return reshape(out, (csr.n_rows, f))


def edge_logits(csr: Csr, dst_score: Tensor, src_score: Tensor) -> Tensor:
    """dst_score[row(j)] + src_score[indices[j]] per CSR entry."""
    rows = csr.row_of_entry
    value = dst_score.value[rows] + src_score.value[csr.indices]

    def adjoint(g):
        return (kernels.scatter_add_rows(rows, g, csr.n_rows),
                kernels.scatter_add_rows(csr.indices, g, src_score.value.shape[0]))

    return dst_score.tape.op(value, (dst_score, src_score), adjoint)


def segment_softmax(csr: Csr, logits: Tensor) -> Tensor:
    alpha = kernels.segment_softmax(csr.indptr, logits.value)
    return logits.tape.op(alpha, (logits,),
                          lambda g: (kernels.segment_softmax_backward(csr.indptr, alpha, g),))
