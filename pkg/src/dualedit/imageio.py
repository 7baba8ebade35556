"""Lossless 8-bit image I/O (PPM/PNG) for [3, H, W] float images in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgument

LOSSLESS_SUFFIXES = {".ppm", ".pnm", ".png"}


def save_image(path, img) -> None:
    path = Path(path)
    if path.suffix.lower() not in LOSSLESS_SUFFIXES:
        raise InvalidArgument(f"{path.suffix} is not a lossless format")
    arr = np.asarray(img, dtype=np.float64)
    arr = np.clip(np.rint(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() not in LOSSLESS_SUFFIXES:
        raise InvalidArgument(f"{path.suffix} is not a lossless format")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise InvalidArgument(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).copy()
