"""Procedural image sets: the training texture corpus and the attack targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng

IMAGE_SIZE = 32
IMAGE_SHAPE = (3, IMAGE_SIZE, IMAGE_SIZE)
SHARPNESS = 1.5


@dataclass(frozen=True)
class TextureSpec:
    """Recipe for a set of two-colour striped / checkered textures."""

    count: int = 256
    seed: int = 0
    size: int = IMAGE_SIZE


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, S, S) in [0, 1]
    spec: TextureSpec | None = None
    source: str | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"dataset images must be (n, 3, H, W), got {self.images.shape}")
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("dataset pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)


def texture(rng: Rng, size: int = IMAGE_SIZE) -> np.ndarray:
    """One random two-colour texture: stripes (h/v/diagonal) or checkerboard."""
    kind = int(rng.integers(0, 1))
    orient = int(rng.integers(0, 2))
    period = int(rng.integers(8, 16))
    phase = rng.uniform(2) * period
    colors = rng.uniform((2, 3))
    # keep the two colours visibly apart
    colors[1] = np.where(np.abs(colors[1] - colors[0]) < 0.25, 1.0 - colors[0], colors[1])

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = lambda c, ph: np.sin(2.0 * np.pi * (c + ph) / period)  # noqa: E731
    if kind == 0:
        coord = (xx, yy, (xx + yy) / np.sqrt(2.0))[orient]
        profile = wave(coord, phase[0])
    else:
        profile = wave(xx, phase[0]) * wave(yy, phase[1])
    # soft-edged two-colour mask in [0, 1]
    mask = 0.5 + 0.5 * np.tanh(SHARPNESS * profile)
    img = colors[0][:, None, None] * (1.0 - mask) + colors[1][:, None, None] * mask
    return np.clip(img, 0.0, 1.0)


def make_textures(spec: TextureSpec = TextureSpec()) -> Dataset:
    rng = Rng(spec.seed, stream=0x7E47)
    images = np.stack([texture(rng.fork(i), spec.size) for i in range(spec.count)])
    return Dataset(images, spec=spec, source="procedural")


# --------------------------------------------------------------------------
# target images for the textural loss

# 8x8 glyph: a blocky asymmetric letterform, tiled densely as the "logo" target
_GLYPH = np.array(
    [
        [1, 1, 0, 0, 0, 1, 1, 0],
        [1, 1, 1, 0, 1, 1, 1, 0],
        [1, 0, 1, 1, 1, 0, 1, 0],
        [1, 0, 0, 1, 0, 0, 1, 0],
        [1, 0, 0, 0, 0, 0, 1, 0],
        [1, 0, 0, 0, 0, 0, 1, 0],
        [1, 0, 0, 0, 0, 0, 1, 0],
        [0, 0, 0, 0, 0, 0, 0, 0],
    ],
    dtype=np.float64,
)

TARGET_IDS = ("zero", "gradient", "stripes", "glyph")
# row labels of the target-comparison table, in the same order
TARGET_LABELS = {
    "none": "No Attack",
    "zero": "Zero_Target",
    "gradient": "Target1",
    "stripes": "Target2",
    "glyph": "Target_Logo",
}


def make_target(target_id: str, size: int = IMAGE_SIZE) -> np.ndarray:
    """Procedural target image in [0, 1] with shape (3, size, size).

    ``zero``      all-black, carries no information
    ``gradient``  low-contrast smooth diagonal ramp (0.4 to 0.6)
    ``stripes``   high-contrast vertical stripes with period 2
    ``glyph``     dense tiling of an 8x8 binary glyph
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if target_id == "zero":
        plane = np.zeros((size, size))
    elif target_id == "gradient":
        plane = 0.4 + 0.2 * (xx + yy) / (2 * (size - 1))
    elif target_id == "stripes":
        plane = (xx % 2 == 0).astype(np.float64)
    elif target_id == "glyph":
        plane = np.tile(_GLYPH, (size // 8 + 1, size // 8 + 1))[:size, :size]
    else:
        raise ValueError(f"unknown target id {target_id!r}; expected one of {TARGET_IDS}")
    return np.repeat(plane[None], 3, axis=0)
