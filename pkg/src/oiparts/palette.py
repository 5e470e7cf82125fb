"""Fixed 10-color palette for rendering label maps and overlays."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

PALETTE = np.array(
    [
        (31, 119, 180),
        (255, 127, 14),
        (44, 160, 44),
        (214, 39, 40),
        (148, 103, 189),
        (140, 86, 75),
        (227, 119, 194),
        (127, 127, 127),
        (188, 189, 34),
        (23, 190, 207),
    ],
    dtype=np.uint8,
)


def colorize_labels(labels: np.ndarray) -> np.ndarray:
    """Map class indices to palette colors (cycling past 10 classes)."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ShapeError(f"label map must be rank 2, got rank {arr.ndim}")
    return PALETTE[arr.astype(np.int64) % len(PALETTE)]


def blend_overlay(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """50% blend of the palette over the image, in integer arithmetic."""
    img = np.asarray(image)
    colors = colorize_labels(labels)
    if img.shape != colors.shape:
        raise ShapeError(f"image {img.shape} does not match labels {colors.shape}")
    return ((img.astype(np.uint16) + colors.astype(np.uint16)) // 2).astype(np.uint8)
