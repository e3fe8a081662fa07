"""Radiodensity-aware dual sampling for initializing the two Gaussian sets.

Interface points come from the marching-cubes vertex set of the density field
(every grid edge whose endpoints straddle the threshold contributes one linearly
interpolated vertex, which is exactly the vertex set the case table emits).
Homogeneous regions are covered by voxel centers drawn in proportion to
density. All interface points seed the isotropic set; the density-weighted
points are split evenly between the two sets.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .gsmodel import DEFAULT_K, DIRECTIONAL, ISOTROPIC, GaussianSet
from .volume import AttenuationVolume

MARCHING_CUBES = "marching_cubes"
DENSITY_WEIGHTED = "density_weighted"
UNIFORM_RANDOM = "uniform_random"


class SamplingError(ValueError):
    pass


@dataclass
class PointSet:
    points: np.ndarray
    source_tag: str

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return self.points.shape[0]


def default_threshold(v: AttenuationVolume) -> float:
    return 0.5 * (float(v.density.min()) + float(v.density.max()))


def marching_cubes(v: AttenuationVolume, threshold: float | None = None) -> PointSet:
    d = v.density
    if threshold is None:
        threshold = default_threshold(v)
    if d.min() == d.max():
        return PointSet(np.zeros((0, 3)), MARCHING_CUBES)
    inside = d >= threshold
    out = []
    # array axes are (k, j, i); world axes are (x, y, z) = (i, j, k)
    for arr_axis in (2, 1, 0):
        n = d.shape[arr_axis]
        a = np.take(d, np.arange(n - 1), axis=arr_axis)
        b = np.take(d, np.arange(1, n), axis=arr_axis)
        ia = np.take(inside, np.arange(n - 1), axis=arr_axis)
        ib = np.take(inside, np.arange(1, n), axis=arr_axis)
        kk, jj, ii = np.nonzero(ia != ib)
        va, vb = a[kk, jj, ii], b[kk, jj, ii]
        frac = (threshold - va) / (vb - va)
        ijk = np.stack([ii, jj, kk], axis=1).astype(np.float64)
        ijk[:, 2 - arr_axis] += frac
        out.append(ijk)
    ijk = np.concatenate(out)
    return PointSet(np.asarray(v.origin) + ijk * np.asarray(v.spacing), MARCHING_CUBES)


def density_weighted_sample(v: AttenuationVolume, n: int, seed: int) -> PointSet:
    if n < 1:
        raise SamplingError("n must be ≥ 1")
    w = v.density.ravel()
    total = float(w.sum())
    if not total > 0:
        raise SamplingError("no sampling mass")
    rng = np.random.default_rng(seed)
    idx = rng.choice(w.size, size=n, replace=True, p=w / total)
    return PointSet(v.voxel_centers(idx), DENSITY_WEIGHTED)


def initial_log_scales(points: np.ndarray, v: AttenuationVolume) -> np.ndarray:
    """Log of the mean distance to the three nearest other points, floored at half a voxel."""
    floor = 0.5 * min(v.spacing)
    n = points.shape[0]
    if n == 0:
        return np.zeros(0)
    if n == 1:
        dist = np.array([floor])
    else:
        kq = min(4, n)
        dd, _ = cKDTree(points).query(points, k=kq)
        dist = dd[:, 1:].mean(axis=1)
    return np.log(np.clip(dist, floor, v.diagonal))


def rads_init(v: AttenuationVolume, n1: int, n2: int, seed: int, k: int = DEFAULT_K,
              directional: bool = True, threshold: float | None = None, dump_dir=None):
    """Return ``(iso, dir)``. With ``directional=False`` all points seed the isotropic set."""
    if n1 < 2 or n2 < 2:
        raise SamplingError("n1 and n2 must be ≥ 2")
    n2 -= n2 % 2
    rng = np.random.default_rng(seed)
    mc = marching_cubes(v, threshold)
    if len(mc) > n1:
        keep = np.sort(rng.choice(len(mc), size=n1, replace=False))
        mc = PointSet(mc.points[keep], MARCHING_CUBES)
    dw = density_weighted_sample(v, n2, int(rng.integers(2**63)))
    perm = rng.permutation(n2)
    first, second = dw.points[perm[: n2 // 2]], dw.points[perm[n2 // 2:]]
    if dump_dir is not None:
        save_points(mc, Path(dump_dir) / "points_mc.txt")
        save_points(dw, Path(dump_dir) / "points_dw.txt")
    if directional:
        iso_pts, dir_pts = np.concatenate([mc.points, first]), second
    else:
        iso_pts, dir_pts = np.concatenate([mc.points, dw.points[perm]]), np.zeros((0, 3))
    scales = initial_log_scales(np.concatenate([iso_pts, dir_pts]), v)
    n_iso = iso_pts.shape[0]
    iso = GaussianSet.create(iso_pts, scales[:n_iso], k, ISOTROPIC)
    dir_ = GaussianSet.create(dir_pts, scales[n_iso:], k, DIRECTIONAL)
    return iso, dir_


def random_init(v: AttenuationVolume, n_iso: int, n_dir: int, seed: int, k: int = DEFAULT_K):
    """Uniform positions in the volume's bounding box; same scale rule as ``rads_init``."""
    rng = np.random.default_rng(seed)
    lo, hi = v.bounds
    pts = rng.uniform(lo, hi, size=(n_iso + n_dir, 3))
    scales = initial_log_scales(pts, v)
    return (GaussianSet.create(pts[:n_iso], scales[:n_iso], k, ISOTROPIC),
            GaussianSet.create(pts[n_iso:], scales[n_iso:], k, DIRECTIONAL))


def save_points(ps: PointSet, path) -> None:
    np.savetxt(path, ps.points, fmt="%.6f", header=f"source={ps.source_tag} n={len(ps)} x_mm y_mm z_mm")


def load_points(path) -> PointSet:
    path = Path(path)
    first = path.read_text().splitlines()[0]
    tag = first.split("source=")[1].split()[0] if "source=" in first else DENSITY_WEIGHTED
    return PointSet(np.loadtxt(path, ndmin=2).reshape(-1, 3), tag)
