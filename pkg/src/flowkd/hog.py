"""Histogram of oriented gradients over a coarse cell grid.

This is the handcrafted "teacher" for cloning experiments: unsigned
orientations, centred [-1, 0, 1] derivative filters, magnitude-weighted hard
binning per cell, one global L2 normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class HogSpec:
    cells: tuple[int, int] = (2, 2)
    orientation_bins: int = 9
    signed: bool = False
    normalize: bool = True

    def __post_init__(self):
        if self.orientation_bins < 2:
            raise ValueError("need at least two orientation bins")

    @property
    def length(self) -> int:
        return self.cells[0] * self.cells[1] * self.orientation_bins


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        return image
    if image.shape[0] == 3:
        return np.tensordot(LUMA, image, axes=(0, 0))
    if image.shape[0] == 1:
        return image[0]
    raise ValueError(f"cannot convert image of shape {image.shape} to grayscale")


def gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centred differences; border pixels use zero gradient."""
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = gray[:, 2:] - gray[:, :-2]
    gy[1:-1, :] = gray[2:, :] - gray[:-2, :]
    return gx, gy


def hog_extract(image: np.ndarray, spec: HogSpec = HogSpec()) -> np.ndarray:
    gray = to_gray(image)
    h, w = gray.shape
    cy, cx = spec.cells
    if h % cy or w % cx:
        raise ValueError(f"image {h}x{w} does not split into a {cy}x{cx} cell grid")
    gx, gy = gradients(gray)
    mag = np.hypot(gx, gy)
    span = 2 * np.pi if spec.signed else np.pi
    ang = np.mod(np.arctan2(gy, gx), span)
    bins = np.minimum((ang / span * spec.orientation_bins).astype(np.int64), spec.orientation_bins - 1)
    ch, cw = h // cy, w // cx
    cell_id = (np.arange(h)[:, None] // ch) * cx + (np.arange(w)[None, :] // cw)
    flat = cell_id * spec.orientation_bins + bins
    feat = np.bincount(flat.ravel(), weights=mag.ravel(), minlength=spec.length).astype(float)
    norm = np.linalg.norm(feat)
    if spec.normalize and norm > 0:
        feat = feat / norm
    return feat


class HogTeacher:
    """Frozen feature extractor exposing one transfer point: the HoG vector."""

    transfer_points = [0]
    head = None
    arch = "hog"

    def __init__(self, spec: HogSpec = HogSpec()):
        self.spec = spec

    @property
    def n_transfer_points(self) -> int:
        return 1

    def representations(self, x: np.ndarray, batch_size: int = 256) -> list[np.ndarray]:
        return [np.stack([hog_extract(img, self.spec) for img in x])]
