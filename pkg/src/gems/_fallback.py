"""Pure-numpy versions of the sparse kernels in ``_kernels.pyx``."""
import numpy as np


def _row_of_entry(indptr):
    return np.repeat(np.arange(indptr.shape[0] - 1), np.diff(indptr))


def spmm(indptr, indices, weights, x, n_rows):
    H, F = x.shape[1], x.shape[2]
    out = np.zeros((n_rows, H, F), dtype=x.dtype)
    if indices.shape[0] == 0:
        return out
    gathered = x[indices] * weights[:, :, None]
    deg = np.diff(indptr)
    nonempty = np.flatnonzero(deg)
    out[nonempty] = np.add.reduceat(gathered, indptr[:-1][nonempty], axis=0)
    return out


def sddmm(indptr, indices, a, b):
    rows = _row_of_entry(indptr)
    return np.einsum("jhf,jhf->jh", a[rows], b[indices])


def segment_softmax(indptr, logits):
    out = np.zeros_like(logits)
    if logits.shape[0] == 0:
        return out
    nonempty = np.flatnonzero(np.diff(indptr))
    starts = indptr[:-1][nonempty]
    rows = _row_of_entry(indptr)
    row_max = np.zeros((indptr.shape[0] - 1, logits.shape[1]), dtype=logits.dtype)
    row_max[nonempty] = np.maximum.reduceat(logits, starts, axis=0)
    e = np.exp(logits - row_max[rows])
    row_sum = np.ones_like(row_max)
    row_sum[nonempty] = np.add.reduceat(e, starts, axis=0)
    return e / row_sum[rows]


def segment_softmax_backward(indptr, alpha, grad):
    if alpha.shape[0] == 0:
        return np.zeros_like(alpha)
    nonempty = np.flatnonzero(np.diff(indptr))
    rows = _row_of_entry(indptr)
    dot = np.zeros((indptr.shape[0] - 1, alpha.shape[1]), dtype=alpha.dtype)
    dot[nonempty] = np.add.reduceat(alpha * grad, indptr[:-1][nonempty], axis=0)
    return alpha * (grad - dot[rows])


def scatter_add_rows(index, values, n_rows):
    out = np.zeros((n_rows, values.shape[1]), dtype=values.dtype)
    np.add.at(out, index, values)
    return out
