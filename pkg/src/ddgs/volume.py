"""CT volumes: raw+sidecar I/O, analytic phantoms, HU windowing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_WINDOW = (-1000.0, 2000.0)
DEFAULT_MU_SCALE = 0.02  # mm^-1 at density 1.0

_DTYPES = {"f32": np.dtype("<f4"), "i16": np.dtype("<i2")}


class VolumeError(ValueError):
    pass


def _check_geometry(dims, spacing, origin):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise VolumeError("dims, spacing and origin need 3 entries each")
    if any(d < 1 for d in dims):
        raise VolumeError("dims must be ≥ 1")
    if any(not s > 0 for s in spacing):
        raise VolumeError("spacing must be > 0")
    if not all(np.isfinite(origin)):
        raise VolumeError("origin must be finite")
    return dims, spacing, origin


@dataclass(frozen=True)
class _Grid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space box enclosing all voxels (faces, not centers)."""
        sp = np.asarray(self.spacing)
        lo = np.asarray(self.origin) - 0.5 * sp
        hi = lo + np.asarray(self.dims) * sp
        return lo, hi

    @property
    def center(self) -> np.ndarray:
        lo, hi = self.bounds
        return 0.5 * (lo + hi)

    @property
    def diagonal(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def voxel_centers(self, flat_index: np.ndarray) -> np.ndarray:
        """World positions of voxels given x-fastest flat indices."""
        nx, ny, _ = self.dims
        flat_index = np.asarray(flat_index, dtype=np.int64)
        i = flat_index % nx
        j = (flat_index // nx) % ny
        k = flat_index // (nx * ny)
        ijk = np.stack([i, j, k], axis=-1).astype(np.float64)
        return np.asarray(self.origin) + ijk * np.asarray(self.spacing)


@dataclass(frozen=True)
class CtVolume(_Grid):
    """Hounsfield-unit grid. ``values`` is indexed ``[k, j, i]`` (x fastest in memory)."""

    values: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        dims, spacing, origin = _check_geometry(self.dims, self.spacing, self.origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        values = np.asarray(self.values)
        if values.size != self.n_voxels:
            raise VolumeError("element count mismatch")
        values = values.reshape(dims[2], dims[1], dims[0])
        if not np.all(np.isfinite(values)):
            raise VolumeError("values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class AttenuationVolume(_Grid):
    """Normalized radiodensity in [0, 1]; attenuation per mm is ``density * mu_scale``."""

    density: np.ndarray = field(repr=False, default=None)
    mu_scale: float = DEFAULT_MU_SCALE

    def __post_init__(self):
        dims, spacing, origin = _check_geometry(self.dims, self.spacing, self.origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        density = np.asarray(self.density, dtype=np.float64)
        if density.size != self.n_voxels:
            raise VolumeError("element count mismatch")
        density = density.reshape(dims[2], dims[1], dims[0])
        if np.any(density < 0) or np.any(density > 1) or not np.all(np.isfinite(density)):
            raise VolumeError("density must lie in [0, 1]")
        if not self.mu_scale > 0:
            raise VolumeError("mu_scale must be > 0")
        density.flags.writeable = False
        object.__setattr__(self, "density", density)
        object.__setattr__(self, "mu_scale", float(self.mu_scale))

    @property
    def mu(self) -> np.ndarray:
        return self.density * self.mu_scale


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def load_volume(path) -> CtVolume:
    """Read a raw little-endian volume plus its ``<file>.json`` sidecar."""
    path = Path(path)
    side = _sidecar_path(path)
    try:
        meta = json.loads(side.read_text())
        dims = meta["dims"]
        spacing = meta["spacing_mm"]
        origin = meta["origin_mm"]
        dtype = _DTYPES[meta["dtype"]]
    except FileNotFoundError as exc:
        raise VolumeError(f"missing sidecar {side}") from exc
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise VolumeError(f"ill-formed sidecar {side}: {exc}") from exc
    _check_geometry(dims, spacing, origin)
    raw = np.fromfile(path, dtype=dtype)
    if raw.size != int(np.prod(dims)):
        raise VolumeError("element count mismatch")
    values = raw.astype(np.float32) if dtype.kind == "f" else raw.astype(np.int16)
    return CtVolume(dims=dims, spacing=spacing, origin=origin, values=values)


def save_volume(v: CtVolume, path, dtype: str = "f32") -> None:
    if dtype not in _DTYPES:
        raise VolumeError(f"unsupported dtype {dtype!r}")
    path = Path(path)
    data = np.ascontiguousarray(v.values).astype(_DTYPES[dtype])
    if dtype == "i16" and not np.array_equal(data, v.values):
        raise VolumeError("values not representable as int16")
    path.write_bytes(data.tobytes(order="C"))
    meta = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing),
        "origin_mm": list(v.origin),
        "dtype": dtype,
    }
    _sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")


# -- phantoms ---------------------------------------------------------------


def centered_origin(dims, spacing) -> tuple[float, float, float]:
    """Origin placing the volume center at the world origin (isocenter)."""
    return tuple(-0.5 * (d - 1) * s for d, s in zip(dims, spacing))


def _rotation_from_euler_deg(angles) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    return Rotation.from_euler("xyz", angles, degrees=True).as_matrix()


def make_phantom(spec: dict) -> CtVolume:
    """Rasterize analytic primitives onto a voxel grid.

    ``spec`` keys: ``dims``, ``spacing_mm`` (default 1), optional ``origin_mm``
    (default: centered on the world origin), ``background_hu`` and
    ``primitives``. Each primitive is a dict with ``type`` in
    {sphere, box, ellipsoid}, ``hu``, and a ``center`` in voxel units; spheres
    take ``radius``, boxes ``size`` (full edge lengths), ellipsoids ``radii``
    and an optional ``rotation_deg`` (xyz Euler). Later primitives overwrite
    earlier ones.
    """
    try:
        dims = tuple(int(d) for d in spec["dims"])
    except (KeyError, TypeError) as exc:
        raise VolumeError("phantom spec needs dims") from exc
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise VolumeError("dims must be ≥ 1")
    spacing = spec.get("spacing_mm", (1.0, 1.0, 1.0))
    if np.isscalar(spacing):
        spacing = (float(spacing),) * 3
    origin = spec.get("origin_mm") or centered_origin(dims, spacing)
    values = np.full((dims[2], dims[1], dims[0]), float(spec.get("background_hu", -1000.0)))

    k, j, i = np.meshgrid(
        np.arange(dims[2], dtype=np.float64),
        np.arange(dims[1], dtype=np.float64),
        np.arange(dims[0], dtype=np.float64),
        indexing="ij",
    )
    pts = np.stack([i, j, k], axis=-1)
    for prim in spec.get("primitives", []):
        kind = prim.get("type")
        try:
            c = np.asarray(prim["center"], dtype=np.float64)
            hu = float(prim["hu"])
        except (KeyError, TypeError, ValueError) as exc:
            raise VolumeError(f"primitive needs center and hu: {prim}") from exc
        d = pts - c
        if kind == "sphere":
            mask = np.einsum("...i,...i->...", d, d) <= float(prim["radius"]) ** 2
        elif kind == "box":
            half = 0.5 * np.asarray(prim["size"], dtype=np.float64)
            mask = np.all(np.abs(d) <= half, axis=-1)
        elif kind == "ellipsoid":
            radii = np.asarray(prim["radii"], dtype=np.float64)
            rot = _rotation_from_euler_deg(prim.get("rotation_deg", (0.0, 0.0, 0.0)))
            local = d @ rot
            mask = np.sum((local / radii) ** 2, axis=-1) <= 1.0
        else:
            raise VolumeError(f"unknown primitive type {kind!r}")
        values[mask] = hu
    return CtVolume(dims=dims, spacing=spacing, origin=origin, values=values)


def default_phantom_spec(n: int = 64, spacing_mm: float = 1.5) -> dict:
    """Two-material (soft tissue + bone) asymmetric phantom used by the examples."""
    s = n / 64.0
    c = 0.5 * (n - 1)
    return {
        "dims": [n, n, n],
        "spacing_mm": [spacing_mm] * 3,
        "background_hu": -1000.0,
        "primitives": [
            {"type": "ellipsoid", "center": [c, c, c], "radii": [26 * s, 20 * s, 24 * s],
             "rotation_deg": [0.0, 0.0, 20.0], "hu": 40.0},
            {"type": "sphere", "center": [c + 9 * s, c - 4 * s, c + 6 * s], "radius": 7 * s, "hu": 1200.0},
            {"type": "box", "center": [c - 10 * s, c + 5 * s, c - 4 * s], "size": [6 * s, 8 * s, 22 * s],
             "hu": 1200.0},
        ],
    }


def hu_to_density(v: CtVolume, window=DEFAULT_WINDOW, mu_scale: float = DEFAULT_MU_SCALE) -> AttenuationVolume:
    lo, hi = (float(w) for w in window)
    if not lo < hi:
        raise VolumeError("window requires hu_lo < hu_hi")
    density = np.clip((v.values.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return AttenuationVolume(
        dims=v.dims, spacing=v.spacing, origin=v.origin, density=density, mu_scale=mu_scale
    )
