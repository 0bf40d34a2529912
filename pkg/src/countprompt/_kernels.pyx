# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled correlation and peak picking (see ``_kernels_py`` for the
reference semantics). Blob rendering stays in numpy: its separable form is a
single BLAS matmul and loses nothing to Python overhead."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def correlate_same(double[:, ::1] image, double[:, ::1] kernel):
    cdef Py_ssize_t H = image.shape[0]
    cdef Py_ssize_t W = image.shape[1]
    cdef Py_ssize_t kh = kernel.shape[0]
    cdef Py_ssize_t kw = kernel.shape[1]
    cdef Py_ssize_t rh = kh // 2
    cdef Py_ssize_t rw = kw // 2
    cdef Py_ssize_t i, j, a, b, ii, jj, a0, a1, b0, b1
    cdef double acc
    out_arr = np.empty((H, W), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(H):
        a0 = rh - i if i < rh else 0
        a1 = kh if i + kh - rh <= H else H - i + rh
        for j in range(W):
            b0 = rw - j if j < rw else 0
            b1 = kw if j + kw - rw <= W else W - j + rw
            acc = 0.0
            for a in range(a0, a1):
                ii = i + a - rh
                for b in range(b0, b1):
                    acc += kernel[a, b] * image[ii, j + b - rw]
            out[i, j] = acc
    return out_arr


def local_peaks(double[:, ::1] response, double threshold, double min_separation):
    cdef Py_ssize_t H = response.shape[0]
    cdef Py_ssize_t W = response.shape[1]
    cdef Py_ssize_t i, j, a, b, n, m, q
    cdef double v
    cdef bint is_max
    cand_r = []
    cand_c = []
    cand_v = []
    for i in range(H):
        for j in range(W):
            v = response[i, j]
            if v < threshold:
                continue
            is_max = True
            for a in range(i - 1, i + 2):
                if a < 0 or a >= H:
                    continue
                for b in range(j - 1, j + 2):
                    if b < 0 or b >= W:
                        continue
                    if response[a, b] > v:
                        is_max = False
                        break
                if not is_max:
                    break
            if is_max:
                cand_r.append(i)
                cand_c.append(j)
                cand_v.append(v)
    n = len(cand_r)
    if n == 0:
        return np.zeros((0, 2), dtype=np.int64)
    rows = np.asarray(cand_r, dtype=np.int64)
    cols = np.asarray(cand_c, dtype=np.int64)
    order = np.lexsort((rows * W + cols, -np.asarray(cand_v)))
    cdef cnp.int64_t[::1] r_v = rows
    cdef cnp.int64_t[::1] c_v = cols
    cdef cnp.int64_t[::1] o_v = order.astype(np.int64)
    kept_arr = np.empty((n, 2), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] kept = kept_arr
    cdef double min_d2 = min_separation * min_separation
    cdef double dr, dc
    m = 0
    for q in range(n):
        i = r_v[o_v[q]]
        j = c_v[o_v[q]]
        is_max = True
        for a in range(m):
            dr = i - kept[a, 0]
            dc = j - kept[a, 1]
            if dr * dr + dc * dc < min_d2:
                is_max = False
                break
        if is_max:
            kept[m, 0] = i
            kept[m, 1] = j
            m += 1
    return kept_arr[:m].copy()
