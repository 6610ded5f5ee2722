"""Lobe volumes from caliper axes or label masks, and dice overlap."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .grid import LabelMask

__all__ = [
    "LobeAxes",
    "VolumetryConfig",
    "ellipsoid_volume",
    "total_thyroid_volume",
    "mask_volume",
    "dice_score",
]

ELLIPSOID_FACTOR = 0.48
MM3_PER_ML = 1000.0


@dataclass(frozen=True)
class LobeAxes:
    """Caliper measurements of one lobe, in cm."""

    length: float
    width: float
    depth: float

    def __post_init__(self):
        for name in ("length", "width", "depth"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise DomainError(f"{name} must be positive, got {v}")
            if v > 20.0:
                raise DomainError(f"{name}={v} cm exceeds the 20 cm sanity bound")


@dataclass(frozen=True)
class VolumetryConfig:
    correction_factor: float = ELLIPSOID_FACTOR

    def __post_init__(self):
        if not (0.0 < self.correction_factor <= 1.0):
            raise DomainError(f"correction factor must be in (0, 1], got {self.correction_factor}")


def ellipsoid_volume(axes: LobeAxes, cfg: VolumetryConfig = VolumetryConfig()) -> float:
    """``factor * L * W * D`` in ml (cm^3). No isthmus term is added."""
    return cfg.correction_factor * axes.length * axes.width * axes.depth


def total_thyroid_volume(left: float, right: float) -> float:
    if left < 0 or right < 0:
        raise DomainError(f"lobe volumes must be non-negative, got {left}, {right}")
    return left + right


def mask_volume(mask: LabelMask, spacing=None) -> float:
    """Foreground voxel count times voxel volume, in ml.

    ``spacing`` (mm, x-first) defaults to the mask's own spacing.
    """
    spacing = mask.spacing if spacing is None else tuple(float(s) for s in spacing)
    if len(spacing) != mask.data.ndim or min(spacing) <= 0:
        raise DomainError(f"spacing {spacing} invalid for a {mask.data.ndim}D mask")
    return mask.count * float(np.prod(spacing)) / MM3_PER_ML


def dice_score(a: LabelMask, b: LabelMask) -> float:
    """``2|A∩B| / (|A|+|B|)``; two empty masks score 1."""
    da = a.data if isinstance(a, LabelMask) else np.asarray(a)
    db = b.data if isinstance(b, LabelMask) else np.asarray(b)
    if da.shape != db.shape:
        raise ShapeError(f"mask shapes differ: {da.shape} vs {db.shape}")
    if isinstance(a, LabelMask) and isinstance(b, LabelMask) and not np.allclose(a.spacing, b.spacing):
        raise ShapeError(f"mask spacings differ: {a.spacing} vs {b.spacing}")
    na, nb = int(np.count_nonzero(da)), int(np.count_nonzero(db))
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(np.logical_and(da, db)))
    return 2.0 * inter / (na + nb)
