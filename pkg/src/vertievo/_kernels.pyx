# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scheduling kernels. Semantics mirror ``_kernels_py`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free
from libc.string cimport memset

cnp.import_array()

ctypedef cnp.int64_t i64


cdef void _select_top(i64* buf, Py_ssize_t n, Py_ssize_t kth) noexcept nogil:
    # quickselect: afterwards buf[kth:] holds the n - kth largest values
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j, mid
    cdef i64 pivot, tmp
    while lo < hi:
        mid = lo + (hi - lo) // 2
        # median of three as pivot
        if buf[mid] < buf[lo]:
            tmp = buf[mid]; buf[mid] = buf[lo]; buf[lo] = tmp
        if buf[hi] < buf[lo]:
            tmp = buf[hi]; buf[hi] = buf[lo]; buf[lo] = tmp
        if buf[hi] < buf[mid]:
            tmp = buf[hi]; buf[hi] = buf[mid]; buf[mid] = tmp
        pivot = buf[mid]
        i = lo
        j = hi
        while i <= j:
            while buf[i] < pivot:
                i += 1
            while buf[j] > pivot:
                j -= 1
            if i <= j:
                tmp = buf[i]; buf[i] = buf[j]; buf[j] = tmp
                i += 1
                j -= 1
        if kth <= j:
            hi = j
        elif kth >= i:
            lo = i
        else:
            return


def decode_batch(
    const i64[:, ::1] orders,
    const i64[::1] release,
    const i64[::1] demand,
    const i64[::1] class_index,
    const i64[::1] pad_offset,
    const i64[:, ::1] separations,
    i64 bin_width,
):
    cdef Py_ssize_t n_rows = orders.shape[0], n = orders.shape[1]
    cdef Py_ssize_t n_pads = pad_offset[pad_offset.shape[0] - 1]
    cdef i64 last_bin = separations.shape[1] - 1
    starts_arr = np.empty((n_rows, n), dtype=np.int64)
    pads_arr = np.empty((n_rows, n), dtype=np.int64)
    cdef i64[:, ::1] starts = starts_arr
    cdef i64[:, ::1] pads = pads_arr
    cdef i64* pad_free = <i64*>malloc(max(n_pads, 1) * sizeof(i64))
    if pad_free == NULL:
        raise MemoryError()
    cdef Py_ssize_t row, j, k, best
    cdef i64 i, c, s, b
    try:
        with nogil:
            for row in range(n_rows):
                memset(pad_free, 0, n_pads * sizeof(i64))
                for j in range(n):
                    i = orders[row, j]
                    c = class_index[i]
                    best = pad_offset[c]
                    for k in range(pad_offset[c] + 1, pad_offset[c + 1]):
                        if pad_free[k] < pad_free[best]:
                            best = k
                    s = release[i] if release[i] > pad_free[best] else pad_free[best]
                    b = s // bin_width
                    if b > last_bin:
                        b = last_bin
                    pad_free[best] = s + demand[i] + separations[c, b]
                    starts[row, i] = s
                    pads[row, i] = best
    finally:
        free(pad_free)
    return starts_arr, pads_arr


def order_crossover(const i64[::1] a, const i64[::1] b, Py_ssize_t lo, Py_ssize_t hi):
    cdef Py_ssize_t n = a.shape[0], k, pos
    cdef i64 g
    child_arr = np.empty(n, dtype=np.int64)
    cdef i64[::1] child = child_arr
    cdef char* taken = <char*>malloc(max(n, 1))
    if taken == NULL:
        raise MemoryError()
    try:
        memset(taken, 0, n)
        for k in range(lo, hi):
            child[k] = a[k]
            taken[a[k]] = 1
        pos = hi % n if n else 0
        for k in range(n):
            g = b[(hi + k) % n]
            if taken[g]:
                continue
            child[pos] = g
            pos = (pos + 1) % n
    finally:
        free(taken)
    return child_arr


def wait_moments(const i64[:, ::1] waits, Py_ssize_t k_tail, i64 long_threshold):
    cdef Py_ssize_t n_rows = waits.shape[0], n = waits.shape[1], row, j
    out_arr = np.empty((n_rows, 6), dtype=np.int64)
    cdef i64[:, ::1] out = out_arr
    cdef i64* buf = <i64*>malloc(max(n, 1) * sizeof(i64))
    if buf == NULL:
        raise MemoryError()
    cdef i64 w, tot, sq, mx, tail, zeros, longs
    try:
        with nogil:
            for row in range(n_rows):
                tot = 0; sq = 0; mx = waits[row, 0]; zeros = 0; longs = 0
                for j in range(n):
                    w = waits[row, j]
                    buf[j] = w
                    tot += w
                    sq += w * w
                    if w > mx:
                        mx = w
                    if w == 0:
                        zeros += 1
                    if w > long_threshold:
                        longs += 1
                _select_top(buf, n, n - k_tail)
                tail = 0
                for j in range(n - k_tail, n):
                    tail += buf[j]
                out[row, 0] = tot
                out[row, 1] = sq
                out[row, 2] = mx
                out[row, 3] = tail
                out[row, 4] = zeros
                out[row, 5] = longs
    finally:
        free(buf)
    return out_arr


def penalty_sums(
    const i64[:, ::1] starts,
    const i64[:, ::1] waits,
    const i64[::1] class_index,
    const double[:, ::1] penalty,
    i64 bin_width,
):
    cdef Py_ssize_t n_rows = starts.shape[0], n = starts.shape[1], row, i
    cdef i64 last_bin = penalty.shape[1] - 1, b
    cdef double acc
    out_arr = np.empty(n_rows, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for row in range(n_rows):
            acc = 0.0
            for i in range(n):
                b = starts[row, i] // bin_width
                if b > last_bin:
                    b = last_bin
                acc = acc + penalty[class_index[i], b] * <double>waits[row, i]
            out[row] = acc
    return out_arr
