"""Pure numpy implementations of the hot image kernels.

These are the reference path and the fallback when the compiled extension is
unavailable. ``render_blobs`` and ``render_blobs_vjp`` only use ufuncs,
broadcasting and matmul, so they also accept :class:`countprompt.autodiff.Dual`
arrays (needed for Hessian-vector products).
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def _axis_profiles(centers, sigma, height, width):
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)
    dx = xs[None, :] - centers[:, 0:1]
    dy = ys[None, :] - centers[:, 1:2]
    gx = np.exp(-(dx * dx) * inv)
    gy = np.exp(-(dy * dy) * inv)
    return gx, gy, dx, dy


def render_blobs(presence, centers, sigma, height, width):
    """Sum of isotropic Gaussian bumps, ``image[y, x] = sum_k p_k g_k(x, y)``.

    ``centers`` is ``(K, 2)`` in ``(x, y)`` pixel coordinates.
    """
    gx, gy, _, _ = _axis_profiles(centers, sigma, height, width)
    return (gy * presence[:, None]).T @ gx


def render_blobs_vjp(grad, presence, centers, sigma):
    """Pull an image cotangent back to ``(d_presence, d_centers)``."""
    height, width = grad.shape
    gx, gy, dx, dy = _axis_profiles(centers, sigma, height, width)
    inv_s2 = 1.0 / (sigma * sigma)
    m = gy @ grad            # (K, W)
    n = gx @ grad.T          # (K, H)
    mg = m * gx
    ng = n * gy
    d_presence = mg.sum(axis=1)
    d_cx = presence * (mg * dx).sum(axis=1) * inv_s2
    d_cy = presence * (ng * dy).sum(axis=1) * inv_s2
    return d_presence, _stack_columns(d_cx, d_cy)


def _stack_columns(a, b):
    # np.stack is not a ufunc; build (K, 2) from broadcasting so Dual works too
    left = np.array([1.0, 0.0])
    right = np.array([0.0, 1.0])
    return a[:, None] * left[None, :] + b[:, None] * right[None, :]


def correlate_same(image, kernel):
    """Zero-padded 2-D cross-correlation with an odd-sized kernel."""
    return ndimage.correlate(np.asarray(image, dtype=np.float64), kernel,
                             mode="constant", cval=0.0)


def local_peaks(response, threshold, min_separation):
    """Greedy peak picking: 3x3 local maxima above ``threshold``, strongest
    first, dropping any peak closer than ``min_separation`` to a kept one.

    Returns an ``(n, 2)`` int array of ``(row, col)``.
    """
    response = np.asarray(response, dtype=np.float64)
    neigh = ndimage.maximum_filter(response, size=3, mode="constant", cval=-np.inf)
    mask = (response >= neigh) & (response >= threshold)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    vals = response[rows, cols]
    # descending by value, ties broken by raster order
    order = np.lexsort((rows * response.shape[1] + cols, -vals))
    min_d2 = float(min_separation) ** 2
    kept: list[tuple[int, int]] = []
    for idx in order:
        r, c = int(rows[idx]), int(cols[idx])
        if all((r - kr) ** 2 + (c - kc) ** 2 >= min_d2 for kr, kc in kept):
            kept.append((r, c))
    return np.asarray(kept, dtype=np.int64).reshape(-1, 2)
