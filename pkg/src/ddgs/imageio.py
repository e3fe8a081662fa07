"""Image files: 16-bit grayscale PNG for viewing, raw float32 + JSON sidecar for exact values."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .splat import RenderedImage


def write_png16(img: RenderedImage, path) -> None:
    q = np.round(np.clip(img.pixels, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def read_png16(path) -> RenderedImage:
    return RenderedImage(np.asarray(Image.open(path), dtype=np.float64) / 65535.0)


def write_raw(img: RenderedImage, path) -> None:
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(img.pixels, dtype="<f4").tobytes())
    side = {"width": img.width, "height": img.height, "dtype": "f32"}
    path.with_name(path.name + ".json").write_text(json.dumps(side) + "\n")


def read_raw(path) -> RenderedImage:
    path = Path(path)
    side = json.loads(path.with_name(path.name + ".json").read_text())
    data = np.fromfile(path, dtype="<f4")
    if data.size != side["width"] * side["height"]:
        raise ValueError(f"{path}: element count mismatch")
    return RenderedImage(data.reshape(side["height"], side["width"]).astype(np.float64))


def write_image(img: RenderedImage, png_path, raw_path=None) -> None:
    write_png16(img, png_path)
    if raw_path is not None:
        write_raw(img, raw_path)


def read_image(path) -> RenderedImage:
    path = Path(path)
    if path.suffix.lower() == ".png":
        return read_png16(path)
    return read_raw(path)
