"""Pure NumPy versions of the hot kernels.

Semantics are the reference for ``_ckernels.pyx``; the two must agree exactly
for medians and label-for-label for DBSCAN.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NOISE = -1
_UNSEEN = -2


def _window_bounds(sorted_col: np.ndarray, eps: float):
    lo = np.searchsorted(sorted_col, sorted_col - eps, side="left")
    hi = np.searchsorted(sorted_col, sorted_col + eps, side="right")
    return lo, hi


def dbscan(X, eps: float, min_pts: int, sort_col: int = 0) -> np.ndarray:
    """Density clustering of rows of ``X``; rows must be sorted by ``sort_col``.

    Neighbourhoods are closed balls (``d <= eps``) and include the point itself,
    so ``min_pts`` counts the point. Labels are numbered in seed order; noise is -1.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    labels = np.full(n, _UNSEEN, dtype=np.int64)
    if n == 0:
        return labels
    lo, hi = _window_bounds(X[:, sort_col], eps)
    eps2 = eps * eps

    def region(i):
        a, b = lo[i], hi[i]
        d = X[a:b] - X[i]
        return a + np.flatnonzero(np.einsum("ij,ij->i", d, d) <= eps2)

    cluster = 0
    for i in range(n):
        if labels[i] != _UNSEEN:
            continue
        nb = region(i)
        if nb.size < min_pts:
            labels[i] = NOISE
            continue
        labels[i] = cluster
        stack = []
        for k in nb:
            if labels[k] == NOISE:
                labels[k] = cluster
            elif labels[k] == _UNSEEN:
                labels[k] = cluster
                stack.append(k)
        while stack:
            j = stack.pop()
            nbj = region(j)
            if nbj.size < min_pts:
                continue
            for k in nbj:
                if labels[k] == NOISE:
                    labels[k] = cluster
                elif labels[k] == _UNSEEN:
                    labels[k] = cluster
                    stack.append(k)
        cluster += 1
    return labels


def running_median(x, half: int) -> np.ndarray:
    """Centred median with window ``2*half+1``, shrunk symmetrically at the ends."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    out = x.copy()
    if n == 0 or half <= 0:
        return out
    if n > 2 * half:
        out[half:n - half] = np.median(sliding_window_view(x, 2 * half + 1), axis=1)
    for i in range(min(half, n)):
        for j in (i, n - 1 - i):
            k = min(half, j, n - 1 - j)
            out[j] = np.median(x[j - k:j + k + 1])
    return out


def hampel(x, half: int, n_sigma: float) -> np.ndarray:
    """Replace samples further than ``n_sigma`` scaled MADs from the window median."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    out = x.copy()
    for i in range(n):
        k = min(half, i, n - 1 - i)
        w = x[i - k:i + k + 1]
        med = np.median(w)
        mad = 1.4826 * np.median(np.abs(w - med))
        if abs(x[i] - med) > n_sigma * mad:
            out[i] = med
    return out
