"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``.

Each tile is processed as a dense (pixels x gaussians) block; the
early-termination rule is applied as a prefix mask so the result matches the
sequential loop.
"""

from __future__ import annotations

import numpy as np

SIGMA_MAX = 0.99
T_MIN = 1e-4


def _tile_block(tile, tile_ranges, point_list, means2d, conics, opacities, width, height, tile_size):
    tiles_x = (width + tile_size - 1) // tile_size
    ty, tx = divmod(tile, tiles_x)
    x0, y0 = tx * tile_size, ty * tile_size
    x1, y1 = min(x0 + tile_size, width), min(y0 + tile_size, height)
    start, end = tile_ranges[tile]
    rows, cols = np.mgrid[y0:y1, x0:x1]
    rows, cols = rows.ravel(), cols.ravel()
    g = point_list[start:end]
    dx = cols[:, None] - means2d[g, 0][None, :]
    dy = rows[:, None] - means2d[g, 1][None, :]
    ca, cb, cc = conics[g, 0], conics[g, 1], conics[g, 2]
    gauss = np.exp(-0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy)
    raw = opacities[g] * gauss
    sigma = np.minimum(raw, SIGMA_MAX)
    one_minus = 1.0 - sigma
    t_after = np.cumprod(one_minus, axis=1)
    valid = np.logical_and.accumulate(t_after >= T_MIN, axis=1)
    t_before = np.ones_like(t_after)
    t_before[:, 1:] = t_after[:, :-1]
    return rows, cols, g, start, dx, dy, gauss, raw, sigma, t_before, t_after, valid


def rasterize_forward(tile_ranges, point_list, means2d, conics, opacities, colors, width, height, tile_size):
    image = np.zeros((height, width))
    final_t = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for tile in range(tile_ranges.shape[0]):
        rows, cols, g, start, *_, sigma, t_before, t_after, valid = _tile_block(
            tile, tile_ranges, point_list, means2d, conics, opacities, width, height, tile_size
        )
        w = np.where(valid, sigma * t_before, 0.0)
        image[rows, cols] = w @ colors[g] if len(g) else 0.0
        count = valid.sum(axis=1)
        n_contrib[rows, cols] = start + count
        if len(g):
            last = np.maximum(count - 1, 0)
            ft = t_after[np.arange(len(rows)), last]
            final_t[rows, cols] = np.where(count > 0, ft, 1.0)
        else:
            n_contrib[rows, cols] = start
    return image, final_t, n_contrib


def rasterize_backward(tile_ranges, point_list, means2d, conics, opacities, colors,
                       final_t, n_contrib, grad_image, width, height, tile_size):
    n = means2d.shape[0]
    g_means = np.zeros((n, 2))
    g_conics = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_colors = np.zeros(n)
    for tile in range(tile_ranges.shape[0]):
        rows, cols, g, start, dx, dy, gauss, raw, sigma, t_before, t_after, valid = _tile_block(
            tile, tile_ranges, point_list, means2d, conics, opacities, width, height, tile_size
        )
        if not len(g):
            continue
        gp = grad_image[rows, cols][:, None]
        col = colors[g][None, :]
        w = np.where(valid, sigma * t_before, 0.0)
        wc = w * col
        # contributions strictly behind each entry, renormalized by T after it
        behind = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
        with np.errstate(divide="ignore", invalid="ignore"):
            rest = behind / t_after
        dsig = np.where(valid, gp * t_before * (col - rest), 0.0)
        np.add.at(g_colors, g, np.sum(w * gp, axis=0))
        live = raw < SIGMA_MAX
        dsig = np.where(live, dsig, 0.0)
        gpow = dsig * raw
        ca, cb, cc = conics[g, 0], conics[g, 1], conics[g, 2]
        np.add.at(g_opac, g, np.sum(dsig * gauss, axis=0))
        np.add.at(g_means[:, 0], g, np.sum(gpow * (ca * dx + cb * dy), axis=0))
        np.add.at(g_means[:, 1], g, np.sum(gpow * (cb * dx + cc * dy), axis=0))
        np.add.at(g_conics[:, 0], g, np.sum(-0.5 * dx * dx * gpow, axis=0))
        np.add.at(g_conics[:, 1], g, np.sum(-0.5 * dx * dy * gpow, axis=0))
        np.add.at(g_conics[:, 2], g, np.sum(-0.5 * dy * dy * gpow, axis=0))
    return g_means, g_conics, g_opac, g_colors


def siddon_one(mu, lo, hi, spacing, src, dst) -> float:
    d = dst - src
    length = float(np.linalg.norm(d))
    amin, amax = 0.0, 1.0
    moving = d != 0
    if np.any(~moving & ((src <= lo) | (src >= hi))):
        return 0.0
    a0 = (lo[moving] - src[moving]) / d[moving]
    a1 = (hi[moving] - src[moving]) / d[moving]
    amin = max(amin, float(np.max(np.minimum(a0, a1), initial=-np.inf)))
    amax = min(amax, float(np.min(np.maximum(a0, a1), initial=np.inf)))
    if amin >= amax:
        return 0.0
    alphas = [np.array([amin, amax])]
    dims = mu.shape[::-1]
    for ax in np.flatnonzero(moving):
        planes = lo[ax] + np.arange(dims[ax] + 1) * spacing[ax]
        a = (planes - src[ax]) / d[ax]
        alphas.append(a[(a > amin) & (a < amax)])
    a = np.unique(np.concatenate(alphas))
    mid = 0.5 * (a[1:] + a[:-1])
    pts = src[None, :] + mid[:, None] * d[None, :]
    idx = np.floor((pts - lo) / spacing).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(dims) - 1)
    return float(np.sum(np.diff(a) * mu[idx[:, 2], idx[:, 1], idx[:, 0]]) * length)


def siddon_batch(mu, origin, spacing, src, dst):
    spacing = np.asarray(spacing, dtype=np.float64)
    lo = np.asarray(origin, dtype=np.float64) - 0.5 * spacing
    hi = lo + np.asarray(mu.shape[::-1]) * spacing
    return np.array([siddon_one(mu, lo, hi, spacing, s, t) for s, t in zip(src, dst)])
