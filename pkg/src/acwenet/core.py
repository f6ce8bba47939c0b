"""Shared array conventions, mask algebra, region statistics and metrics.

Images, masks and score fields are plain 2D numpy arrays:

* image  -- non-negative float grid (normalized copies live in [0, 1])
* binary mask -- uint8 grid of {0, 1}
* soft mask -- float grid in [0, 1]
* score field -- finite float grid whose sign carries the class
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

EMPTY_REGION_TOL = 1e-12
MIN_SIDE = 8


class BlankImageError(ValueError):
    """Raised when an image has no positive intensity to normalize by."""


@dataclass(frozen=True)
class RegionStats:
    c1: float  # mean intensity inside
    c2: float  # mean intensity outside


@dataclass(frozen=True)
class HyperParams:
    """Energy and loss weights.

    ``mu``, ``nu``, ``lambda1`` and ``lambda2`` weight the length, area,
    inside-fit and outside-fit terms of the Chan-Vese energy.  ``alpha``
    weights the label loss against it.  ``beta`` sets the sharpness of the
    sigmoid that stands in for the hard indicator ``score > 0`` and
    ``eps_tv`` smooths the gradient magnitude in the label loss.
    """

    mu: float = 0.0
    nu: float = 0.004
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 0.4
    beta: float = 1.0
    eps_tv: float = 1e-8

    def __post_init__(self):
        for name in ("mu", "lambda1", "lambda2", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.eps_tv <= 0:
            raise ValueError(f"eps_tv must be > 0, got {self.eps_tv}")

    def to_dict(self) -> dict:
        return asdict(self)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch between {what}: {np.shape(a)} vs {np.shape(b)}")


def as_image(data, *, min_side: int = MIN_SIDE) -> np.ndarray:
    """Validate and return ``data`` as a float64 2D image."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2D, got shape {img.shape}")
    if min(img.shape) < min_side:
        raise ValueError(f"image sides must be >= {min_side}, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if np.any(img < 0):
        raise ValueError("image contains negative values")
    return img


def as_mask(data) -> np.ndarray:
    """Validate and return ``data`` as a uint8 {0,1} mask."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("mask values must be exactly 0 or 1")
    return arr.astype(np.uint8)


def normalize(image) -> np.ndarray:
    """Scale an image by its maximum so that the brightest pixel is 1."""
    img = np.asarray(image, dtype=np.float64)
    peak = img.max() if img.size else 0.0
    if not peak > 0:
        raise BlankImageError("blank image: no value > 0 to normalize by")
    return img / peak


def threshold(score) -> np.ndarray:
    """Foreground wherever the score is strictly positive."""
    return (np.asarray(score) > 0).astype(np.uint8)


def region_means(image, weights) -> RegionStats:
    """Weighted means of ``image`` inside (``weights``) and outside (``1 - weights``).

    A region whose total weight is below ``EMPTY_REGION_TOL`` gets the global
    image mean instead, so downstream energies stay finite.
    """
    g = np.asarray(image, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    check_same_shape(g, w, "image and weights")
    w_in = w.sum()
    w_out = (1.0 - w).sum()
    fallback = float(g.mean())
    c1 = float((w * g).sum() / w_in) if w_in >= EMPTY_REGION_TOL else fallback
    c2 = float(((1.0 - w) * g).sum() / w_out) if w_out >= EMPTY_REGION_TOL else fallback
    return RegionStats(c1, c2)


def dice(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    check_same_shape(a, b, "masks")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def discrete_length(mask) -> float:
    """Half the number of 4-neighbour pairs whose labels differ."""
    m = np.asarray(mask).astype(np.int8)
    changes = np.count_nonzero(m[1:, :] != m[:-1, :]) + np.count_nonzero(m[:, 1:] != m[:, :-1])
    return 0.5 * changes


def acwe_energy(image, mask, hp: HyperParams) -> float:
    """Chan-Vese energy of a hard partition, with c1/c2 set to its region means."""
    g = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask).astype(np.float64)
    check_same_shape(g, m, "image and mask")
    stats = region_means(g, m)
    inside = float((m * (g - stats.c1) ** 2).sum())
    outside = float(((1.0 - m) * (g - stats.c2) ** 2).sum())
    energy = hp.nu * float(m.sum()) + hp.lambda1 * inside + hp.lambda2 * outside
    if hp.mu:
        energy += hp.mu * discrete_length(m)
    return energy
