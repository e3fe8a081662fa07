# cython: language_level=3
"""Compiled inner loops: tile compositing (forward/backward) and Siddon ray sums.

Semantics are mirrored exactly by ``ddgs._pykernels``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil, sqrt, INFINITY

cnp.import_array()

cdef double SIGMA_MAX = 0.99
cdef double T_MIN = 1e-4


def rasterize_forward(const cnp.int64_t[:, ::1] tile_ranges,
                      const cnp.int64_t[::1] point_list,
                      const double[:, ::1] means2d,
                      const double[:, ::1] conics,
                      const double[::1] opacities,
                      const double[::1] colors,
                      int width, int height, int tile_size):
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef int tiles_y = (height + tile_size - 1) // tile_size
    image_np = np.zeros((height, width), dtype=np.float64)
    final_t_np = np.ones((height, width), dtype=np.float64)
    n_contrib_np = np.zeros((height, width), dtype=np.int64)
    cdef double[:, ::1] image = image_np
    cdef double[:, ::1] final_t = final_t_np
    cdef cnp.int64_t[:, ::1] n_contrib = n_contrib_np

    cdef Py_ssize_t longest = 1
    cdef int tile
    for tile in range(tiles_x * tiles_y):
        longest = max(longest, tile_ranges[tile, 1] - tile_ranges[tile, 0])
    # exponents for a whole tile are evaluated in one vectorized np.exp call
    power_np = np.empty(longest * tile_size * tile_size, dtype=np.float64)
    cdef double[::1] power = power_np
    # the tile's Gaussians in depth order, one contiguous array per attribute
    local_np = np.empty((7, longest), dtype=np.float64)
    cdef double[:, ::1] local = local_np
    cdef double[::1] lmx = local[0], lmy = local[1], lca = local[2], lcb = local[3], lcc = local[4]
    cdef double[::1] lop = local[5], lcol = local[6]

    cdef int tx, ty, px, py, x0, y0, x1, y1
    cdef cnp.int64_t start, end, g, last, j, count, row, n_px
    cdef double t, c, dx, dy, sigma, test_t
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            start = tile_ranges[ty * tiles_x + tx, 0]
            end = tile_ranges[ty * tiles_x + tx, 1]
            count = end - start
            x0 = tx * tile_size
            y0 = ty * tile_size
            x1 = min(x0 + tile_size, width)
            y1 = min(y0 + tile_size, height)
            n_px = (y1 - y0) * (x1 - x0)
            with nogil:
                for j in range(count):
                    g = point_list[start + j]
                    lmx[j] = means2d[g, 0]
                    lmy[j] = means2d[g, 1]
                    lca[j] = conics[g, 0]
                    lcb[j] = conics[g, 1]
                    lcc[j] = conics[g, 2]
                    lop[j] = opacities[g]
                    lcol[j] = colors[g]
                row = 0
                for py in range(y0, y1):
                    for px in range(x0, x1):
                        for j in range(count):
                            dx = px - lmx[j]
                            dy = py - lmy[j]
                            power[row + j] = -0.5 * (lca[j] * dx * dx + lcc[j] * dy * dy) - lcb[j] * dx * dy
                        row += count
            np.exp(power_np[:count * n_px], out=power_np[:count * n_px])
            with nogil:
                row = 0
                for py in range(y0, y1):
                    for px in range(x0, x1):
                        t = 1.0
                        c = 0.0
                        last = start
                        for j in range(count):
                            sigma = lop[j] * power[row + j]
                            if sigma > SIGMA_MAX:
                                sigma = SIGMA_MAX
                            test_t = t * (1.0 - sigma)
                            if test_t < T_MIN:
                                break
                            c += lcol[j] * sigma * t
                            t = test_t
                            last = start + j + 1
                        image[py, px] = c
                        final_t[py, px] = t
                        n_contrib[py, px] = last
                        row += count
    return image_np, final_t_np, n_contrib_np


def rasterize_backward(const cnp.int64_t[:, ::1] tile_ranges,
                       const cnp.int64_t[::1] point_list,
                       const double[:, ::1] means2d,
                       const double[:, ::1] conics,
                       const double[::1] opacities,
                       const double[::1] colors,
                       const double[:, ::1] final_t,
                       const cnp.int64_t[:, ::1] n_contrib,
                       const double[:, ::1] grad_image,
                       int width, int height, int tile_size):
    cdef Py_ssize_t n = means2d.shape[0]
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef int tiles_y = (height + tile_size - 1) // tile_size
    g_means_np = np.zeros((n, 2), dtype=np.float64)
    g_conics_np = np.zeros((n, 3), dtype=np.float64)
    g_opac_np = np.zeros(n, dtype=np.float64)
    g_colors_np = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] g_means = g_means_np
    cdef double[:, ::1] g_conics = g_conics_np
    cdef double[::1] g_opac = g_opac_np
    cdef double[::1] g_colors = g_colors_np

    cdef Py_ssize_t longest = 1
    cdef int tile
    for tile in range(tiles_x * tiles_y):
        longest = max(longest, tile_ranges[tile, 1] - tile_ranges[tile, 0])
    gauss_np = np.empty(longest * tile_size * tile_size, dtype=np.float64)
    cdef double[::1] gbuf = gauss_np

    cdef int tx, ty, px, py, x0, y0, x1, y1
    cdef cnp.int64_t start, end, e, g, j, count, row, base, n_px
    cdef double t, acc, gp, dx, dy, ca, cb, cc, gauss, raw, sigma, dsig, gpow, mx, my
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            start = tile_ranges[ty * tiles_x + tx, 0]
            end = tile_ranges[ty * tiles_x + tx, 1]
            count = end - start
            if count == 0:
                continue
            x0 = tx * tile_size
            y0 = ty * tile_size
            x1 = min(x0 + tile_size, width)
            y1 = min(y0 + tile_size, height)
            n_px = (y1 - y0) * (x1 - x0)
            with nogil:
                for j in range(count):
                    g = point_list[start + j]
                    mx = means2d[g, 0]
                    my = means2d[g, 1]
                    ca = conics[g, 0]
                    cb = conics[g, 1]
                    cc = conics[g, 2]
                    row = j
                    for py in range(y0, y1):
                        dy = py - my
                        for px in range(x0, x1):
                            dx = px - mx
                            gbuf[row] = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                            row += count
            np.exp(gauss_np[:count * n_px], out=gauss_np[:count * n_px])
            with nogil:
                base = 0
                for py in range(y0, y1):
                    for px in range(x0, x1):
                        gp = grad_image[py, px]
                        if gp == 0.0:
                            base += count
                            continue
                        t = final_t[py, px]
                        acc = 0.0
                        e = n_contrib[py, px] - 1
                        while e >= start:
                            g = point_list[e]
                            ca = conics[g, 0]
                            cb = conics[g, 1]
                            cc = conics[g, 2]
                            dx = px - means2d[g, 0]
                            dy = py - means2d[g, 1]
                            gauss = gbuf[base + e - start]
                            raw = opacities[g] * gauss
                            sigma = raw if raw < SIGMA_MAX else SIGMA_MAX
                            t = t / (1.0 - sigma)
                            g_colors[g] += sigma * t * gp
                            dsig = gp * t * (colors[g] - acc)
                            acc = colors[g] * sigma + (1.0 - sigma) * acc
                            if raw < SIGMA_MAX:
                                g_opac[g] += dsig * gauss
                                gpow = dsig * raw
                                g_means[g, 0] += gpow * (ca * dx + cb * dy)
                                g_means[g, 1] += gpow * (cb * dx + cc * dy)
                                g_conics[g, 0] += -0.5 * dx * dx * gpow
                                g_conics[g, 1] += -0.5 * dx * dy * gpow
                                g_conics[g, 2] += -0.5 * dy * dy * gpow
                            e -= 1
                        base += count
    return g_means_np, g_conics_np, g_opac_np, g_colors_np


cdef double _siddon_one(const double[:, :, ::1] mu, double* lo, double* sp, int* dims,
                        double* src, double* dst) noexcept nogil:
    cdef double d[3]
    cdef double ax[3]
    cdef double da[3]
    cdef double amin = 0.0, amax = 1.0, a0, a1, length, p, acur, anext, amid, total = 0.0
    cdef int i, idx[3]
    for i in range(3):
        d[i] = dst[i] - src[i]
    length = sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    for i in range(3):
        if d[i] != 0.0:
            a0 = (lo[i] - src[i]) / d[i]
            a1 = (lo[i] + dims[i] * sp[i] - src[i]) / d[i]
            if a0 > a1:
                a0, a1 = a1, a0
            if a0 > amin:
                amin = a0
            if a1 < amax:
                amax = a1
        elif src[i] <= lo[i] or src[i] >= lo[i] + dims[i] * sp[i]:
            return 0.0
    if amin >= amax:
        return 0.0
    for i in range(3):
        if d[i] > 0.0:
            p = (src[i] + amin * d[i] - lo[i]) / sp[i]
            ax[i] = (lo[i] + (floor(p) + 1.0) * sp[i] - src[i]) / d[i]
            da[i] = sp[i] / d[i]
        elif d[i] < 0.0:
            p = (src[i] + amin * d[i] - lo[i]) / sp[i]
            ax[i] = (lo[i] + (ceil(p) - 1.0) * sp[i] - src[i]) / d[i]
            da[i] = -sp[i] / d[i]
        else:
            ax[i] = INFINITY
            da[i] = INFINITY
        while ax[i] <= amin:
            ax[i] += da[i]
    acur = amin
    while acur < amax:
        anext = ax[0]
        if ax[1] < anext:
            anext = ax[1]
        if ax[2] < anext:
            anext = ax[2]
        if anext > amax:
            anext = amax
        amid = 0.5 * (acur + anext)
        for i in range(3):
            idx[i] = <int>floor((src[i] + amid * d[i] - lo[i]) / sp[i])
            if idx[i] < 0:
                idx[i] = 0
            elif idx[i] >= dims[i]:
                idx[i] = dims[i] - 1
        total += (anext - acur) * mu[idx[2], idx[1], idx[0]]
        for i in range(3):
            while ax[i] <= anext:
                ax[i] += da[i]
        acur = anext
    return total * length


def siddon_batch(const double[:, :, ::1] mu, origin, spacing,
                 const double[:, ::1] src, const double[:, ::1] dst):
    """Exact line integrals of a voxelized field ``mu[k, j, i]`` along segments."""
    cdef double lo[3]
    cdef double sp[3]
    cdef int dims[3]
    cdef double s[3]
    cdef double t[3]
    cdef Py_ssize_t r, n = src.shape[0]
    cdef int i
    dims[0] = mu.shape[2]
    dims[1] = mu.shape[1]
    dims[2] = mu.shape[0]
    for i in range(3):
        sp[i] = spacing[i]
        lo[i] = origin[i] - 0.5 * sp[i]
    out_np = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_np
    with nogil:
        for r in range(n):
            for i in range(3):
                s[i] = src[r, i]
                t[i] = dst[r, i]
            out[r] = _siddon_one(mu, lo, sp, dims, s, t)
    return out_np
