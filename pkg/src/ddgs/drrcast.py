"""Analytical scatter-free DRR targets by exact voxel traversal (Siddon).

Raw pixels are attenuation line integrals ``∫ density * mu_scale ds`` from the
source through each detector pixel; a single scale maps the whole set to
[0, 1]. An optional synthetic degree-1 modulation adds a view-dependent
residual so the directional Gaussians have something to learn.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from .geometry import CameraView, load_views, save_views
from .imageio import read_image, write_image
from .splat import RenderedImage
from .volume import AttenuationVolume

log = logging.getLogger(__name__)

DEFAULT_ANISO_AXIS = (1.0, 0.5, 0.25)


class TargetError(ValueError):
    pass


@dataclass(frozen=True)
class AnisoPerturbSpec:
    """Pixel gain ``1 + epsilon * (axis · ray_direction)`` with a unit ``axis``."""

    epsilon: float = 0.1
    axis: tuple[float, float, float] = DEFAULT_ANISO_AXIS

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 0.1:
            raise TargetError("anisotropic amplitude must lie in [0, 0.1]")
        a = np.asarray(self.axis, dtype=np.float64)
        if a.shape != (3,) or not np.linalg.norm(a) > 0:
            raise TargetError("axis must be a non-zero 3-vector")
        object.__setattr__(self, "axis", tuple((a / np.linalg.norm(a)).tolist()))
        object.__setattr__(self, "epsilon", float(self.epsilon))

    def gain(self, rays: np.ndarray) -> np.ndarray:
        return 1.0 + self.epsilon * (rays @ np.asarray(self.axis))


@dataclass
class TargetImageSet:
    views: list[CameraView]
    images: list[RenderedImage]
    normalization: dict = field(default_factory=lambda: {"offset": 0.0, "scale": 1.0})
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.views) != len(self.images):
            raise TargetError("views and images must have the same length")

    def __len__(self) -> int:
        return len(self.views)

    def subset(self, indices) -> "TargetImageSet":
        indices = list(indices)
        return TargetImageSet([self.views[i] for i in indices], [self.images[i] for i in indices],
                              dict(self.normalization), dict(self.meta))


def siddon_integral(v: AttenuationVolume, src, dst, backend: str | None = None) -> float:
    src = np.asarray(src, dtype=np.float64).reshape(1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(1, 3)
    if np.array_equal(src, dst):
        raise TargetError("src and dst coincide")
    return float(siddon_rays(v, src, dst, backend)[0])


def siddon_rays(v: AttenuationVolume, src: np.ndarray, dst: np.ndarray, backend: str | None = None) -> np.ndarray:
    kern = _backend.get(backend)
    mu = np.ascontiguousarray(v.mu, dtype=np.float64)
    return kern.siddon_batch(mu, np.asarray(v.origin), np.asarray(v.spacing),
                             np.ascontiguousarray(src, dtype=np.float64),
                             np.ascontiguousarray(dst, dtype=np.float64))


def raw_projection(v: AttenuationVolume, view: CameraView, backend: str | None = None) -> np.ndarray:
    """Unnormalized line integrals for every pixel of ``view``, shape (H, W)."""
    rays = view.pixel_rays().reshape(-1, 3)
    src = np.broadcast_to(view.pose.camera_center, rays.shape)
    reach = np.linalg.norm(view.pose.camera_center - v.center) + v.diagonal
    dst = src + 2.0 * reach * rays
    return siddon_rays(v, src, dst, backend).reshape(view.height, view.width)


def render_targets(v: AttenuationVolume, views, perturb: AnisoPerturbSpec | None = None,
                   backend: str | None = None) -> TargetImageSet:
    views = list(views)
    if not views:
        raise TargetError("empty view list")
    raw = [raw_projection(v, view, backend) for view in views]
    peak = max(float(r.max()) for r in raw)
    if peak > 0:
        scale = 1.0 / peak
    else:
        log.warning("all line integrals are zero; targets are blank")
        scale = 1.0
    images = []
    for view, r in zip(views, raw):
        px = r * scale
        if perturb is not None and perturb.epsilon > 0:
            px = np.clip(px * perturb.gain(view.pixel_rays()), 0.0, 1.0)
        images.append(RenderedImage(px))
    meta = {"perturb": None if perturb is None else {"epsilon": perturb.epsilon, "axis": list(perturb.axis)}}
    return TargetImageSet(views, images, {"offset": 0.0, "scale": scale}, meta)


# -- on-disk target sets ----------------------------------------------------------


def save_target_set(ts: TargetImageSet, out_dir, manifest_extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(ts.images):
        stem = f"view_{i:04d}"
        write_image(img, out / f"{stem}.png", raw_path=out / f"{stem}.raw")
        names.append(stem)
    save_views(ts.views, out / "views.json")
    manifest = {
        "n_views": len(ts),
        "images": names,
        "normalization": ts.normalization,
        **ts.meta,
        **(manifest_extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_target_set(path) -> TargetImageSet:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise TargetError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    views = load_views(root / "views.json")
    images = [read_image(root / f"{stem}.raw") for stem in manifest["images"]]
    if len(images) != len(views):
        raise TargetError(f"{root}: {len(images)} images for {len(views)} views")
    for view, img in zip(views, images):
        if (img.height, img.width) != (view.height, view.width):
            raise TargetError(f"{root}: image size does not match view intrinsics")
    meta = {k: v for k, v in manifest.items() if k not in ("n_views", "images", "normalization")}
    return TargetImageSet(views, images, manifest["normalization"], meta)
