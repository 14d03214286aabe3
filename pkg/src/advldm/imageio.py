"""8-bit RGB PNG <-> float image arrays of shape (3, H, W) in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageFormatError(ValueError):
    pass


def load_image(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an 8-bit RGB PNG; byte ``v`` maps to ``v / 255``.

    ``size`` is ``(height, width)``; when given, other dimensions are rejected.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt, mode = im.format, im.mode
            im.load()
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"{path}: not a readable image ({exc})") from exc
    if fmt != "PNG":
        raise ImageFormatError(f"{path}: expected a PNG file, got {fmt}")
    if mode != "RGB" or arr.dtype != np.uint8:
        raise ImageFormatError(f"{path}: expected 8-bit RGB, got mode {mode!r}")
    if size is not None and arr.shape[:2] != tuple(size):
        raise ImageFormatError(f"{path}: expected {size[0]}x{size[1]} pixels, got {arr.shape[0]}x{arr.shape[1]}")
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_bytes(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected an image of shape (3, H, W), got {x.shape}")
    return np.ascontiguousarray(np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0))


def save_image(x: np.ndarray, path) -> None:
    Image.fromarray(to_bytes(x)).save(path, format="PNG")


def quantize(x: np.ndarray) -> np.ndarray:
    """What ``load_image(save_image(x))`` returns, without touching disk."""
    return to_bytes(x).transpose(2, 0, 1).astype(np.float64) / 255.0


def load_images(paths, size=(32, 32)) -> np.ndarray:
    return np.stack([load_image(p, size) for p in paths])
