"""Core volume and label-map types plus intensity normalization.

Volumes hold float64 data in x-fastest order; label maps hold int32 class
ids. Both are treated as immutable after construction, so every operation
in this package returns a new object and is safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class VoltexError(Exception):
    """Base class for errors raised by this package."""


class VolumeFormatError(VoltexError):
    """A volume or label-map file could not be parsed or written."""


class DegenerateVolumeError(VoltexError):
    """An operation needs intensity variation and the volume has none."""


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar 3D intensity grid.

    ``data`` is float64 with shape ``(nx, ny, nz)`` kept in x-fastest
    (Fortran) memory layout, matching the on-disk voxel order of the file
    formats we read and write. ``spacing`` is millimetres per voxel and
    purely informational.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asfortranarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be 3-D and non-empty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("volume contains NaN or Inf values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3:
            raise ValueError("spacing must have three components")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def num_voxels(self) -> int:
        return int(self.data.size)

    def ravel(self) -> np.ndarray:
        """Flat view of the data in x-fastest order."""
        return self.data.ravel(order="F")


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer 3D class grid with classes ``0 .. num_classes-1``."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {arr.dtype}")
        arr = np.asfortranarray(arr, dtype=np.int32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"label data must be 3-D and non-empty, got shape {arr.shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}), "
                f"got range [{arr.min()}, {arr.max()}]"
            )
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def ravel(self) -> np.ndarray:
        return self.labels.ravel(order="F")


STD_EPSILON = 1e-12


def normalize_zmuv(vol: Volume3D) -> Volume3D:
    """Rescale to zero mean and unit population variance.

    Uses the population (divide-by-N) standard deviation. Raises
    :class:`DegenerateVolumeError` for constant volumes rather than
    producing infinities.
    """
    if vol.num_voxels < 2:
        raise DegenerateVolumeError("need at least 2 voxels to normalize")
    mean = float(vol.data.mean())
    sd = float(vol.data.std())
    if sd <= STD_EPSILON:
        raise DegenerateVolumeError(f"volume is constant (std={sd:g}); cannot normalize")
    return Volume3D((vol.data - mean) / sd, vol.spacing)
