"""Raster, mask and prompt types plus the elementwise mask algebra.

Pixel values are reals in [0, 1] stored as float32; 8-bit quantization
happens only at file boundaries.  Masks are strictly binary.  All types
are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyRegionError, ShapeError

PROMPT_ROLES = ("query", "conditional")


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Image:
    """H×W×3 raster with per-channel values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"image data must be (H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError("image dimensions must be at least 1x1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image values must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    """H×W mask whose entries are exactly 0 or 1."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ShapeError(f"mask data must be (H, W), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError("mask dimensions must be at least 1x1")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", _frozen(arr.astype(np.uint8)))

    @classmethod
    def from_soft(cls, arr: np.ndarray) -> "BinaryMask":
        """Binarize a soft mask at 0.5 (values >= 0.5 become 1)."""
        return cls((np.asarray(arr, dtype=np.float64) >= 0.5).astype(np.uint8))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class TextPrompt:
    """A query ("which region") or conditional ("what to put there") text."""

    text: str
    role: str = "query"

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("prompt text must be non-empty")
        if self.role not in PROMPT_ROLES:
            raise ValueError(f"prompt role must be one of {PROMPT_ROLES}")


def _check_same_dims(a, b, what: str) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise ShapeError(
            f"{what}: {a.height}x{a.width} vs {b.height}x{b.width}"
        )


def apply_mask(image: Image, mask: BinaryMask) -> Image:
    """Elementwise product of an image with a binary mask.

    Masked-out pixels become black; dimensions are preserved.
    """
    _check_same_dims(image, mask, "image/mask dimension mismatch")
    return Image(image.data * mask.data[:, :, None])


def mask_union(masks: Sequence[BinaryMask]) -> BinaryMask:
    """Pixelwise union (max) of one or more same-sized masks."""
    if len(masks) == 0:
        raise ValueError("mask_union needs at least one mask")
    first = masks[0]
    for m in masks[1:]:
        _check_same_dims(first, m, "mask dimension mismatch")
    out = first.data
    for m in masks[1:]:
        out = np.maximum(out, m.data)
    return BinaryMask(out)


def mask_centroid(mask: BinaryMask) -> tuple[float, float]:
    """Mean (x, y) of the set pixels, with pixel centers at integer coords."""
    ys, xs = np.nonzero(mask.data)
    if len(xs) == 0:
        raise EmptyRegionError("centroid of an empty mask is undefined")
    return float(xs.mean()), float(ys.mean())
