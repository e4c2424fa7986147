"""Volumetric grid primitives: typed 3D scalar fields with physical geometry.

Axis convention: arrays are indexed (x, y, z) and ``spacing``/``origin`` use
the same order, in millimetres. ``origin`` is the physical position of the
centre of voxel (0, 0, 0).
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

GEOMETRY_TOL_MM = 1e-3

# 26-connectivity: full 3x3x3 neighbourhood
CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


class VolumeKind(enum.Enum):
    SUV = "suv"
    HU = "hu"
    PROBABILITY = "probability"
    BINARY_MASK = "binary_mask"
    LABEL_MAP = "label_map"


class ResampleMode(enum.Enum):
    LINEAR = "linear"
    NEAREST = "nearest"


_MASK_KINDS = (VolumeKind.BINARY_MASK, VolumeKind.LABEL_MAP)


@dataclass(frozen=True)
class VolumeGrid:
    """A 3D scalar field plus voxel spacing (mm) and origin (mm).

    The data array is locked read-only on construction; derive new grids via
    :meth:`with_data` instead of mutating in place.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: VolumeKind = VolumeKind.SUV

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype == bool:
            data = data.astype(np.uint8)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with each axis >= 1, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin must be length-3")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        self._validate_values(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    def _validate_values(self, data: np.ndarray) -> None:
        if self.kind is VolumeKind.BINARY_MASK:
            if not np.isin(data, (0, 1)).all():
                raise ValueError("BINARY_MASK may only contain {0, 1}")
        elif self.kind is VolumeKind.PROBABILITY:
            if not np.isfinite(data).all() or data.min() < 0 or data.max() > 1:
                raise ValueError("PROBABILITY values must lie in [0, 1]")
        elif self.kind is VolumeKind.LABEL_MAP:
            if not np.issubdtype(data.dtype, np.integer) or data.min() < 0:
                raise ValueError("LABEL_MAP must hold non-negative integers")
        else:
            if not np.isfinite(data).all():
                raise ValueError(f"{self.kind.name} volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_data(self, data: np.ndarray, kind: VolumeKind | None = None) -> "VolumeGrid":
        """New grid with the same geometry but different values (and optionally kind)."""
        return VolumeGrid(data, self.spacing, self.origin, kind or self.kind)

    def same_geometry(self, other: "VolumeGrid", tol_mm: float = GEOMETRY_TOL_MM) -> bool:
        return (
            self.shape == other.shape
            and all(abs(a - b) <= tol_mm for a, b in zip(self.spacing, other.spacing))
            and all(abs(a - b) <= tol_mm for a, b in zip(self.origin, other.origin))
        )


def require_same_geometry(*grids: VolumeGrid, tol_mm: float = GEOMETRY_TOL_MM) -> None:
    first = grids[0]
    for g in grids[1:]:
        if not first.same_geometry(g, tol_mm):
            raise ValueError(
                f"geometry mismatch: {first.shape}/{first.spacing} vs {g.shape}/{g.spacing}"
            )


def resample(grid: VolumeGrid, target_spacing: Sequence[float], mode: ResampleMode) -> VolumeGrid:
    """Resample onto an axis-aligned grid with the given spacing.

    Output shape is chosen so the physical extent is preserved to within one
    output voxel. Voxel centres follow the cell convention: output centre j
    sits at physical (j + 1/2) * s_out measured from the grid corner.
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or any(s <= 0 for s in target):
        raise ValueError(f"target_spacing must be 3 positive values, got {target_spacing}")
    if mode is ResampleMode.LINEAR and grid.kind in _MASK_KINDS:
        raise ValueError(f"LINEAR resampling is invalid for {grid.kind.name}; use NEAREST")

    in_shape = grid.shape
    out_shape = tuple(
        max(1, int(round(n * s_in / s_out)))
        for n, s_in, s_out in zip(in_shape, grid.spacing, target)
    )
    if out_shape == in_shape and all(
        abs(a - b) <= 1e-12 for a, b in zip(grid.spacing, target)
    ):
        return VolumeGrid(grid.data, target, grid.origin, grid.kind)

    axes = [
        (np.arange(out_n, dtype=np.float64) + 0.5) * (s_out / s_in) - 0.5
        for out_n, s_out, s_in in zip(out_shape, target, grid.spacing)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    order = 1 if mode is ResampleMode.LINEAR else 0
    out = ndimage.map_coordinates(
        grid.data.astype(np.float32 if order else grid.data.dtype),
        coords,
        order=order,
        mode="nearest",
    )
    if grid.kind is VolumeKind.PROBABILITY:
        out = np.clip(out, 0.0, 1.0)
    new_origin = tuple(
        o + 0.5 * (s_out - s_in) for o, s_out, s_in in zip(grid.origin, target, grid.spacing)
    )
    return VolumeGrid(out, target, new_origin, grid.kind)


def resample_like(grid: VolumeGrid, like: VolumeGrid, mode: ResampleMode) -> VolumeGrid:
    """Resample onto another grid's exact geometry (shared-corner convention)."""
    if mode is ResampleMode.LINEAR and grid.kind in _MASK_KINDS:
        raise ValueError(f"LINEAR resampling is invalid for {grid.kind.name}; use NEAREST")
    if grid.shape == like.shape and all(
        abs(a - b) <= 1e-12 for a, b in zip(grid.spacing, like.spacing)
    ):
        return VolumeGrid(grid.data, like.spacing, like.origin, grid.kind)
    axes = [
        (np.arange(out_n, dtype=np.float64) + 0.5) * (s_out / s_in) - 0.5
        for out_n, s_out, s_in in zip(like.shape, like.spacing, grid.spacing)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    order = 1 if mode is ResampleMode.LINEAR else 0
    out = ndimage.map_coordinates(
        grid.data.astype(np.float32 if order else grid.data.dtype),
        coords,
        order=order,
        mode="nearest",
    )
    if grid.kind is VolumeKind.PROBABILITY:
        out = np.clip(out, 0.0, 1.0)
    return VolumeGrid(out, like.spacing, like.origin, grid.kind)


def count_components(mask: np.ndarray) -> int:
    """Number of 26-connected foreground components of a binary array."""
    _, n = ndimage.label(mask, structure=CONNECTIVITY_26)
    return int(n)


_STUDY_SUFFIX = re.compile(r"_s\d+$")


def patient_id_of(case_id: str) -> str:
    """Patient key for split grouping: case ids like ``pat12_s01`` share ``pat12``."""
    return _STUDY_SUFFIX.sub("", case_id)


@dataclass(frozen=True)
class CaseRecord:
    """One study: aligned SUV + CT grids, optional ground-truth mask, lesion stats."""

    case_id: str
    suv: VolumeGrid
    ct: VolumeGrid
    gt_mask: VolumeGrid | None = None
    lesion_count: int = field(default=0)
    lesion_volume_ml: float = field(default=0.0)

    def __post_init__(self):
        if self.suv.kind is not VolumeKind.SUV:
            raise ValueError("suv grid must have kind SUV")
        if self.ct.kind is not VolumeKind.HU:
            raise ValueError("ct grid must have kind HU")
        grids = [self.suv, self.ct]
        if self.gt_mask is not None:
            if self.gt_mask.kind is not VolumeKind.BINARY_MASK:
                raise ValueError("gt_mask must have kind BINARY_MASK")
            grids.append(self.gt_mask)
        require_same_geometry(*grids)

    @classmethod
    def from_volumes(
        cls,
        case_id: str,
        suv: VolumeGrid,
        ct: VolumeGrid,
        gt_mask: VolumeGrid | None = None,
    ) -> "CaseRecord":
        """Build a record, deriving lesion stats from the mask."""
        if gt_mask is None:
            return cls(case_id, suv, ct, None, 0, 0.0)
        count = count_components(gt_mask.data)
        volume_ml = float(gt_mask.data.sum()) * gt_mask.voxel_volume_mm3 / 1000.0
        return cls(case_id, suv, ct, gt_mask, count, volume_ml)

    @property
    def patient_id(self) -> str:
        return patient_id_of(self.case_id)
