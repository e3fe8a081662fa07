"""Image quality and model size."""

from __future__ import annotations

import csv

import numpy as np

from .gsmodel import Checkpoint
from .splat import RenderedImage
from .train import ssim

PSNR_CAP = 100.0
# position 3 + quaternion 4 + log-scale 3 + opacity 1
GEOMETRY_FLOATS = 11


def _px(img) -> np.ndarray:
    return img.pixels if isinstance(img, RenderedImage) else np.asarray(img, dtype=np.float64)


def psnr(a, b) -> float:
    x, y = _px(a), _px(b)
    if x.shape != y.shape:
        raise ValueError(f"image dimensions differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def float_count(n_total: int, k: int, shared: int) -> int:
    return n_total * (GEOMETRY_FLOATS + k) + shared


def model_float_breakdown(ckpt: Checkpoint) -> dict:
    k = ckpt.model.k
    per = GEOMETRY_FLOATS + k
    shared = k + ckpt.model.k_L * k
    return {"per_gaussian": per, "n_total": ckpt.n_total, "gaussian_floats": per * ckpt.n_total,
            "shared_floats": shared, "total": per * ckpt.n_total + shared}


def model_float_count(ckpt: Checkpoint) -> int:
    return model_float_breakdown(ckpt)["total"]


EVAL_COLUMNS = ("view", "psnr", "ssim")


def write_eval_report(per_view: list[tuple[float, float]], path, n_points: int | None = None) -> None:
    """Per-view rows followed by one ``mean`` row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS + (("n_points",) if n_points is not None else ()))
        extra = (n_points,) if n_points is not None else ()
        for i, (p, s) in enumerate(per_view):
            w.writerow((i, f"{p:.6f}", f"{s:.6f}") + extra)
        ps = np.array([p for p, _ in per_view])
        ss = np.array([s for _, s in per_view])
        w.writerow(("mean", f"{ps.mean():.6f}", f"{ss.mean():.6f}") + extra)


def evaluate(ckpt: Checkpoint, views, images, backend: str | None = None) -> list[tuple[float, float]]:
    from .splat import render

    out = []
    for view, img in zip(views, images):
        pred = render(ckpt.iso, ckpt.dir, ckpt.model, view, backend)[0]
        if (pred.height, pred.width) != (img.height, img.width):
            raise ValueError("target dimensions do not match the view")
        out.append((psnr(pred, img), ssim(pred, img)))
    return out
