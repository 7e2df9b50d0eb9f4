"""Numba kernels for per-tile alpha compositing and its adjoint.

Tiles write disjoint pixel regions; the backward pass writes one gradient
row per (tile, list entry) pair and a sequential reduction folds them per
splat, so results do not depend on the thread count.
"""
import numba
import numpy as np
from numba import njit, prange

# TBB in this environment is too old; prefer OpenMP, then the builtin queue
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
CUTOFF_M2 = 9.0  # 3 sigma ellipse


@njit(cache=True, parallel=True)
def composite_forward(offsets, indices, tiles_x, tile_size, width, height,
                      mean2d, conic, rgb, alpha, depth, background, t_min,
                      out_img, out_t, out_last, out_median):
    n_tiles = offsets.shape[0] - 1
    for tile in prange(n_tiles):
        start = offsets[tile]
        end = offsets[tile + 1]
        x0 = (tile % tiles_x) * tile_size
        y0 = (tile // tiles_x) * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                last = 0
                med = np.inf
                for k in range(start, end):
                    s = indices[k]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    m2 = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                    if m2 > CUTOFF_M2:
                        continue
                    a = alpha[s] * np.exp(-0.5 * m2)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    w = a * T
                    c0 += rgb[s, 0] * w
                    c1 += rgb[s, 1] * w
                    c2 += rgb[s, 2] * w
                    T = T * (1.0 - a)
                    last = k - start + 1
                    if T < 0.5 and med == np.inf:
                        med = depth[s]
                    if T < t_min:
                        break
                out_img[py, px, 0] = c0 + T * background[0]
                out_img[py, px, 1] = c1 + T * background[1]
                out_img[py, px, 2] = c2 + T * background[2]
                out_t[py, px] = T
                out_last[py, px] = last
                out_median[py, px] = med


@njit(cache=True, parallel=True)
def composite_backward(offsets, indices, tiles_x, tile_size, width, height,
                       mean2d, conic, rgb, alpha, background, out_last, grad_img,
                       entry_grads):
    """Adjoint of :func:`composite_forward`.

    ``entry_grads[k]`` receives, for list entry ``k``, the gradient w.r.t.
    ``(mean_x, mean_y, conic_a, conic_b, conic_c, alpha, r, g, b)``.
    """
    n_tiles = offsets.shape[0] - 1
    for tile in prange(n_tiles):
        start = offsets[tile]
        end = offsets[tile + 1]
        n = end - start
        if n == 0:
            continue
        x0 = (tile % tiles_x) * tile_size
        y0 = (tile // tiles_x) * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        t_before = np.empty(n)
        a_used = np.empty(n)
        g_used = np.empty(n)
        active = np.zeros(n, np.bool_)
        clamped = np.zeros(n, np.bool_)
        for py in range(y0, y1):
            for px in range(x0, x1):
                last = out_last[py, px]
                if last == 0:
                    continue
                gr0 = grad_img[py, px, 0]
                gr1 = grad_img[py, px, 1]
                gr2 = grad_img[py, px, 2]
                if gr0 == 0.0 and gr1 == 0.0 and gr2 == 0.0:
                    continue
                # forward replay, recording transmittance before each entry
                T = 1.0
                for j in range(last):
                    s = indices[start + j]
                    active[j] = False
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    m2 = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                    if m2 > CUTOFF_M2:
                        continue
                    g = np.exp(-0.5 * m2)
                    a = alpha[s] * g
                    clamped[j] = a > ALPHA_MAX
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    active[j] = True
                    t_before[j] = T
                    a_used[j] = a
                    g_used[j] = g
                    T = T * (1.0 - a)
                # colour still to come behind entry j, starting with the background
                r0 = T * background[0]
                r1 = T * background[1]
                r2 = T * background[2]
                for j in range(last - 1, -1, -1):
                    if not active[j]:
                        continue
                    s = indices[start + j]
                    k = start + j
                    a = a_used[j]
                    Tj = t_before[j]
                    w = a * Tj
                    entry_grads[k, 6] += gr0 * w
                    entry_grads[k, 7] += gr1 * w
                    entry_grads[k, 8] += gr2 * w
                    inv = 1.0 / (1.0 - a)
                    dl_da = (gr0 * (rgb[s, 0] * Tj - r0 * inv)
                             + gr1 * (rgb[s, 1] * Tj - r1 * inv)
                             + gr2 * (rgb[s, 2] * Tj - r2 * inv))
                    r0 += rgb[s, 0] * w
                    r1 += rgb[s, 1] * w
                    r2 += rgb[s, 2] * w
                    if clamped[j]:
                        continue
                    g = g_used[j]
                    entry_grads[k, 5] += dl_da * g
                    dl_dm2 = -0.5 * g * alpha[s] * dl_da
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    ca = conic[s, 0]
                    cb = conic[s, 1]
                    cc = conic[s, 2]
                    entry_grads[k, 0] += -dl_dm2 * (2.0 * ca * dx + 2.0 * cb * dy)
                    entry_grads[k, 1] += -dl_dm2 * (2.0 * cb * dx + 2.0 * cc * dy)
                    entry_grads[k, 2] += dl_dm2 * dx * dx
                    entry_grads[k, 3] += dl_dm2 * 2.0 * dx * dy
                    entry_grads[k, 4] += dl_dm2 * dy * dy


@njit(cache=True)
def reduce_entries(indices, entry_grads, n_splats):
    out = np.zeros((n_splats, entry_grads.shape[1]))
    for k in range(indices.shape[0]):
        s = indices[k]
        for c in range(entry_grads.shape[1]):
            out[s, c] += entry_grads[k, c]
    return out
