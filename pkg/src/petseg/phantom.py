"""Synthetic PET/CT phantom cases.

Each phantom is a body ellipsoid (soft tissue, ~+40 HU) with two lung
ellipsoids (~-800 HU), smooth low-grade background uptake, two optional hot
organs (high SUV foci that are *not* lesions: a cranial and a pelvic focus at
stereotyped positions), and a configurable number of spherical lesions whose
union is the ground-truth mask. Everything is drawn from a single seeded
generator, so a spec maps to exactly one case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import CaseRecord, VolumeGrid, VolumeKind

AIR_HU = -1000.0
BODY_HU = 40.0
LUNG_HU = -800.0
LESION_HU = 60.0
HOT_ORGAN_SUV_RANGE = (8.0, 20.0)

_MAX_PLACEMENT_TRIES = 500


class PhantomPlacementError(RuntimeError):
    """Lesions could not be placed without overlap within the retry budget."""


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (96, 64, 64)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    n_lesions: int = 3
    lesion_radius_range: tuple[float, float] = (6.0, 12.0)
    lesion_suv_range: tuple[float, float] = (6.0, 20.0)
    include_hot_organs: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if len(self.shape) != 3 or any(n < 8 for n in self.shape):
            raise ValueError(f"shape must be 3 axes of at least 8 voxels, got {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        if self.n_lesions < 0:
            raise ValueError("n_lesions must be >= 0")
        r_lo, r_hi = self.lesion_radius_range
        if not 0 < r_lo <= r_hi:
            raise ValueError("lesion_radius_range must be a non-empty positive interval")
        if r_lo < max(self.spacing):
            raise ValueError(
                f"minimum lesion radius {r_lo} mm is below one voxel at spacing {self.spacing}"
            )
        s_lo, s_hi = self.lesion_suv_range
        if not (2.0 <= s_lo < s_hi <= 30.0):
            raise ValueError("lesion_suv_range must be a non-empty interval within (2, 30)")


@dataclass(frozen=True)
class _Sphere:
    center: tuple[float, float, float]  # mm
    radius: float  # mm
    value: float = field(default=0.0)


def _coord_axes(shape, spacing):
    # physical coordinate of each voxel centre, per axis, origin at the grid corner
    return [
        (np.arange(n, dtype=np.float64) + 0.5) * s for n, s in zip(shape, spacing)
    ]


def _ellipsoid_mask(axes, center, semi):
    x, y, z = axes
    u = ((x - center[0]) / semi[0]) ** 2
    v = ((y - center[1]) / semi[1]) ** 2
    w = ((z - center[2]) / semi[2]) ** 2
    return (u[:, None, None] + v[None, :, None] + w[None, None, :]) <= 1.0


def _sphere_mask(axes, sphere: _Sphere):
    x, y, z = axes
    u = (x - sphere.center[0]) ** 2
    v = (y - sphere.center[1]) ** 2
    w = (z - sphere.center[2]) ** 2
    return (u[:, None, None] + v[None, :, None] + w[None, None, :]) <= sphere.radius**2


def _smooth_noise(rng, shape, sigma_vox, amplitude):
    g = gaussian_filter(rng.standard_normal(shape), sigma=sigma_vox)
    peak = np.abs(g).max()
    if peak > 0:
        g = g * (amplitude / peak)
    return g


def generate_phantom(spec: PhantomSpec, case_id: str | None = None) -> CaseRecord:
    """Deterministically synthesize one PET/CT case from a spec."""
    rng = np.random.default_rng(spec.rng_seed)
    shape = tuple(int(n) for n in spec.shape)
    spacing = tuple(float(s) for s in spec.spacing)
    extent = np.array([n * s for n, s in zip(shape, spacing)])
    center = extent / 2.0
    axes = _coord_axes(shape, spacing)

    body_semi = extent * np.array([0.46, 0.38, 0.38])
    body = _ellipsoid_mask(axes, center, body_semi)

    lungs = np.zeros(shape, dtype=bool)
    for side in (-1.0, 1.0):
        lung_center = (
            center[0] + 0.22 * extent[0],
            center[1] + side * 0.15 * extent[1],
            center[2],
        )
        lung_semi = extent * np.array([0.14, 0.11, 0.13])
        lungs |= _ellipsoid_mask(axes, lung_center, lung_semi)
    lungs &= body

    ct = np.full(shape, AIR_HU, dtype=np.float32)
    ct[body] = BODY_HU
    ct[lungs] = LUNG_HU
    ct += _smooth_noise(rng, shape, sigma_vox=1.0, amplitude=12.0).astype(np.float32)

    suv = np.full(shape, 0.05, dtype=np.float32)
    suv[body] = 0.8
    suv[lungs] = 0.3
    suv += _smooth_noise(rng, shape, sigma_vox=2.0, amplitude=0.35).astype(np.float32)
    np.clip(suv, 0.0, None, out=suv)

    organs: list[_Sphere] = []
    if spec.include_hot_organs:
        organ_radii = (0.055 * float(extent.min()) + 6.0, 0.045 * float(extent.min()) + 5.0)
        anchors = (
            (center[0] + 0.40 * extent[0], center[1], center[2]),  # cranial focus
            (center[0] - 0.36 * extent[0], center[1], center[2]),  # pelvic focus
        )
        for anchor, radius in zip(anchors, organ_radii):
            jitter = rng.uniform(-3.0, 3.0, size=3)
            value = rng.uniform(*HOT_ORGAN_SUV_RANGE)
            organs.append(_Sphere(tuple(np.array(anchor) + jitter), radius, value))
        for organ in organs:
            m = _sphere_mask(axes, organ)
            suv[m] = organ.value

    lesions = _place_lesions(rng, spec, center, body_semi, organs)
    gt = np.zeros(shape, dtype=np.uint8)
    jitter_amp = 0.05 * (spec.lesion_suv_range[1] - spec.lesion_suv_range[0])
    for les in lesions:
        m = _sphere_mask(axes, les)
        vals = les.value + rng.uniform(-jitter_amp, jitter_amp, size=int(m.sum()))
        suv[m] = np.clip(vals, *spec.lesion_suv_range).astype(np.float32)
        ct[m] = LESION_HU
        gt[m] = 1

    if case_id is None:
        case_id = f"ph{spec.rng_seed:06d}"
    return CaseRecord.from_volumes(
        case_id,
        VolumeGrid(suv, spacing, kind=VolumeKind.SUV),
        VolumeGrid(ct, spacing, kind=VolumeKind.HU),
        VolumeGrid(gt, spacing, kind=VolumeKind.BINARY_MASK),
    )


def generate_cohort(
    count: int,
    seed: int,
    shape: tuple[int, int, int] = (96, 64, 64),
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0),
    n_lesions_range: tuple[int, int] = (1, 4),
    negative_fraction: float = 0.25,
    lesion_radius_range: tuple[float, float] = (7.0, 14.0),
    lesion_suv_range: tuple[float, float] = (6.0, 20.0),
    include_hot_organs: bool = True,
    id_prefix: str = "ph",
) -> list[CaseRecord]:
    """A deterministic cohort mixing negative controls and lesion cases."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(count):
        negative = rng.random() < negative_fraction
        n_lesions = 0 if negative else int(rng.integers(n_lesions_range[0], n_lesions_range[1] + 1))
        case_seed = int(rng.integers(0, 2**31 - 1))
        spec = PhantomSpec(
            shape=shape,
            spacing=spacing,
            n_lesions=n_lesions,
            lesion_radius_range=lesion_radius_range,
            lesion_suv_range=lesion_suv_range,
            include_hot_organs=include_hot_organs,
            rng_seed=case_seed,
        )
        cases.append(generate_phantom(spec, case_id=f"{id_prefix}{i:04d}"))
    return cases


def _place_lesions(rng, spec, center, body_semi, organs):
    """Rejection-sample non-overlapping lesion spheres inside the body."""
    sep = 2.0 * max(spec.spacing)  # keeps connected components one-per-lesion
    placed: list[_Sphere] = []
    for _ in range(spec.n_lesions):
        for attempt in range(_MAX_PLACEMENT_TRIES):
            radius = float(rng.uniform(*spec.lesion_radius_range))
            unit = rng.uniform(-1.0, 1.0, size=3)
            if (unit**2).sum() > 1.0:
                continue
            pos = center + unit * (body_semi * 0.82)
            ok = all(
                np.linalg.norm(pos - np.array(o.center)) > radius + o.radius + 2 * sep
                for o in organs
            ) and all(
                np.linalg.norm(pos - np.array(p.center)) > radius + p.radius + sep
                for p in placed
            )
            if ok:
                value = float(rng.uniform(*spec.lesion_suv_range))
                placed.append(_Sphere(tuple(pos), radius, value))
                break
        else:
            raise PhantomPlacementError(
                f"could not place lesion {len(placed) + 1}/{spec.n_lesions} "
                f"after {_MAX_PLACEMENT_TRIES} attempts"
            )
    return placed
