"""Pure-Python reference versions of the compiled scheduling kernels.

Signatures and results match ``_kernels.pyx`` exactly; this module is used
when the extension is not built or ``VERTIEVO_PURE_PYTHON=1`` is set.
"""
from __future__ import annotations

import numpy as np


def decode_batch(
    orders: np.ndarray,
    release: np.ndarray,
    demand: np.ndarray,
    class_index: np.ndarray,
    pad_offset: np.ndarray,
    separations: np.ndarray,
    bin_width: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy list scheduling of each row of ``orders`` (request indices).

    Returns ``(starts, pads)`` of shape ``orders.shape`` indexed by request.
    """
    n_rows, n = orders.shape
    starts = np.empty((n_rows, n), dtype=np.int64)
    pads = np.empty((n_rows, n), dtype=np.int64)
    last_bin = separations.shape[1] - 1
    rel = release.tolist()
    dem = demand.tolist()
    cls = class_index.tolist()
    off = pad_offset.tolist()
    sep = separations.tolist()
    n_pads = off[-1]
    for row in range(n_rows):
        free = [0] * n_pads
        srow = [0] * n
        prow = [0] * n
        for i in orders[row].tolist():
            c = cls[i]
            best = off[c]
            for k in range(off[c] + 1, off[c + 1]):
                if free[k] < free[best]:
                    best = k
            s = rel[i] if rel[i] > free[best] else free[best]
            b = s // bin_width
            free[best] = s + dem[i] + sep[c][b if b < last_bin else last_bin]
            srow[i] = s
            prow[i] = best
        starts[row] = srow
        pads[row] = prow
    return starts, pads


def order_crossover(a: np.ndarray, b: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """OX: keep ``a[lo:hi]``, fill the rest with ``b``'s order starting at ``hi``."""
    n = a.shape[0]
    child = np.empty(n, dtype=np.int64)
    child[lo:hi] = a[lo:hi]
    taken = set(a[lo:hi].tolist())
    bl = b.tolist()
    pos = hi % n
    for k in range(n):
        g = bl[(hi + k) % n]
        if g in taken:
            continue
        child[pos] = g
        pos = (pos + 1) % n
    return child


def wait_moments(waits: np.ndarray, k_tail: int, long_threshold: int) -> np.ndarray:
    """Per-row integer moments ``(sum, sum_sq, max, tail_sum, zero_count, long_count)``.

    ``tail_sum`` is the sum of the ``k_tail`` largest entries.
    """
    n_rows = waits.shape[0]
    out = np.empty((n_rows, 6), dtype=np.int64)
    w = waits.astype(np.int64)
    out[:, 0] = w.sum(axis=1)
    out[:, 1] = (w * w).sum(axis=1)
    out[:, 2] = w.max(axis=1)
    out[:, 3] = np.sort(w, axis=1)[:, w.shape[1] - k_tail:].sum(axis=1)
    out[:, 4] = (w == 0).sum(axis=1)
    out[:, 5] = (w > long_threshold).sum(axis=1)
    return out


def penalty_sums(
    starts: np.ndarray, waits: np.ndarray, class_index: np.ndarray, penalty: np.ndarray, bin_width: int
) -> np.ndarray:
    """Per-row ``sum_i penalty[class_i, bin(start_i)] * wait_i``, summed in index order."""
    last_bin = penalty.shape[1] - 1
    out = np.empty(starts.shape[0], dtype=np.float64)
    cls = class_index.tolist()
    pen = penalty.tolist()
    for row in range(starts.shape[0]):
        acc = 0.0
        for i, (s, w) in enumerate(zip(starts[row].tolist(), waits[row].tolist())):
            b = s // bin_width
            acc += pen[cls[i]][b if b < last_bin else last_bin] * w
        out[row] = acc
    return out
