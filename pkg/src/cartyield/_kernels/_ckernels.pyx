# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_fallback.py`` (same semantics)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef long NOISE = -1
cdef long UNSEEN = -2


cdef double _select(double* a, Py_ssize_t n, Py_ssize_t k) noexcept nogil:
    # Hoare quickselect, in place; returns the k-th smallest.
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j
    cdef double pivot, tmp
    while lo < hi:
        pivot = a[(lo + hi) >> 1]
        i = lo
        j = hi
        while i <= j:
            while a[i] < pivot:
                i += 1
            while a[j] > pivot:
                j -= 1
            if i <= j:
                tmp = a[i]; a[i] = a[j]; a[j] = tmp
                i += 1
                j -= 1
        if k <= j:
            hi = j
        elif k >= i:
            lo = i
        else:
            return a[k]
    return a[k]


def running_median(x, Py_ssize_t half):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], i, j, k
    out = np.array(xv, copy=True)
    cdef double[::1] ov = out
    if n == 0 or half <= 0:
        return out
    cdef double* buf = <double*> malloc((2 * half + 1) * sizeof(double))
    try:
        with nogil:
            for i in range(n):
                k = half
                if i < k:
                    k = i
                if n - 1 - i < k:
                    k = n - 1 - i
                for j in range(2 * k + 1):
                    buf[j] = xv[i - k + j]
                ov[i] = _select(buf, 2 * k + 1, k)
    finally:
        free(buf)
    return out


def hampel(x, Py_ssize_t half, double n_sigma):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], i, j, k, m
    out = np.array(xv, copy=True)
    cdef double[::1] ov = out
    cdef double med, mad
    if n == 0:
        return out
    cdef double* buf = <double*> malloc((2 * half + 1) * sizeof(double))
    try:
        with nogil:
            for i in range(n):
                k = half
                if i < k:
                    k = i
                if n - 1 - i < k:
                    k = n - 1 - i
                m = 2 * k + 1
                for j in range(m):
                    buf[j] = xv[i - k + j]
                med = _select(buf, m, k)
                for j in range(m):
                    buf[j] = fabs(xv[i - k + j] - med)
                mad = 1.4826 * _select(buf, m, k)
                if fabs(xv[i] - med) > n_sigma * mad:
                    ov[i] = med
    finally:
        free(buf)
    return out


cdef Py_ssize_t _region(double[:, ::1] X, Py_ssize_t i, Py_ssize_t lo, Py_ssize_t hi,
                        double eps2, long* out) noexcept nogil:
    cdef Py_ssize_t j, c, d = X.shape[1], cnt = 0
    cdef double acc, diff
    for j in range(lo, hi):
        acc = 0.0
        for c in range(d):
            diff = X[j, c] - X[i, c]
            acc = acc + diff * diff
        if acc <= eps2:
            out[cnt] = j
            cnt += 1
    return cnt


def dbscan(X, double eps, Py_ssize_t min_pts, Py_ssize_t sort_col=0):
    cdef double[:, ::1] xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0]
    labels = np.full(n, UNSEEN, dtype=np.int64)
    if n == 0:
        return labels
    col = np.asarray(xv[:, sort_col])
    cdef cnp.int64_t[::1] lo = np.searchsorted(col, col - eps, side="left").astype(np.int64)
    cdef cnp.int64_t[::1] hi = np.searchsorted(col, col + eps, side="right").astype(np.int64)
    cdef cnp.int64_t[::1] lab = labels
    cdef Py_ssize_t maxw = 0, i, j, q, cnt, sp
    for i in range(n):
        if hi[i] - lo[i] > maxw:
            maxw = hi[i] - lo[i]
    cdef long* nb = <long*> malloc(maxw * sizeof(long))
    cdef long* stack = <long*> malloc(n * sizeof(long))
    cdef double eps2 = eps * eps
    cdef long cluster = 0, k
    try:
        with nogil:
            for i in range(n):
                if lab[i] != UNSEEN:
                    continue
                cnt = _region(xv, i, lo[i], hi[i], eps2, nb)
                if cnt < min_pts:
                    lab[i] = NOISE
                    continue
                lab[i] = cluster
                sp = 0
                # push order mirrors the fallback's list.append / pop
                for q in range(cnt):
                    k = nb[q]
                    if lab[k] == NOISE:
                        lab[k] = cluster
                    elif lab[k] == UNSEEN:
                        lab[k] = cluster
                        stack[sp] = k
                        sp += 1
                while sp > 0:
                    sp -= 1
                    j = stack[sp]
                    cnt = _region(xv, j, lo[j], hi[j], eps2, nb)
                    if cnt < min_pts:
                        continue
                    for q in range(cnt):
                        k = nb[q]
                        if lab[k] == NOISE:
                            lab[k] = cluster
                        elif lab[k] == UNSEEN:
                            lab[k] = cluster
                            stack[sp] = k
                            sp += 1
                cluster += 1
    finally:
        free(nb)
        free(stack)
    return labels
