"""Training-time stochastic transforms.

Spatial transforms (flips, affine) apply one jointly sampled geometric change
to every channel and the mask; intensity transforms touch only the PET-derived
channels. All sampling comes from an explicit numpy Generator, so a fixed rng
state reproduces the exact augmentation. Array-level helpers are exposed for
the training hot path, which augments crops rather than whole stacks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .preprocess import ChannelStack, STANDARD_CHANNELS
from .volume import (
    CaseRecord,
    ResampleMode,
    VolumeGrid,
    VolumeKind,
    require_same_geometry,
    resample,
)

PET_CHANNEL_NAMES = ("SUV", "SUV_hot")


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: tuple[float, float, float] = (0.5, 0.5, 0.5)
    rotation_deg: float = 15.0
    scale_range: tuple[float, float] = (0.85, 1.15)
    pet_blur_sigma_range: tuple[float, float] = (0.0, 1.5)  # voxels
    pet_brightness_range: tuple[float, float] = (-0.1, 0.1)
    pet_contrast_range: tuple[float, float] = (0.85, 1.15)
    pet_gamma_range: tuple[float, float] = (0.7, 1.5)
    spacing_jitter_range_mm: tuple[float, float] = (2.0, 6.0)  # refiner only
    affine_prob: float = 0.5

    def __post_init__(self):
        if any(not 0.0 <= p <= 1.0 for p in self.p_flip) or not 0.0 <= self.affine_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        for name in (
            "scale_range",
            "pet_blur_sigma_range",
            "pet_brightness_range",
            "pet_contrast_range",
            "pet_gamma_range",
            "spacing_jitter_range_mm",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: ({lo}, {hi})")
        if self.pet_gamma_range[0] <= 0:
            raise ValueError("gamma range must be positive")
        if self.rotation_deg < 0:
            raise ValueError("rotation_deg must be >= 0")


# -- array-level cores --------------------------------------------------------


def flip_arrays(arrays: list[np.ndarray], flips: tuple[bool, bool, bool]) -> list[np.ndarray]:
    axes = tuple(i for i, f in enumerate(flips) if f)
    if not axes:
        return [a.copy() for a in arrays]
    return [np.flip(a, axis=axes).copy() for a in arrays]


def affine_index_matrix(
    angles_deg: tuple[float, float, float], scale: float, spacing: tuple[float, float, float]
) -> np.ndarray:
    """Index-space matrix mapping output voxel coords to input voxel coords.

    The rotation/scale acts in physical (mm) space so anisotropic grids rotate
    rigidly; ``scale`` > 1 magnifies the object.
    """
    ax, ay, az = np.deg2rad(angles_deg)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    rot = rz @ ry @ rx
    m_phys = rot.T / scale  # output -> input physical coords
    s = np.diag(spacing)
    return np.linalg.inv(s) @ m_phys @ s


def affine_transform_array(
    arr: np.ndarray, matrix: np.ndarray, order: int, center_index: np.ndarray
) -> np.ndarray:
    offset = center_index - matrix @ center_index
    return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode="nearest")


def pet_transform_array(
    arr: np.ndarray, sigma: float, contrast: float, brightness: float, gamma: float
) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float32)
    if sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=sigma)
    out = np.clip(out * contrast + brightness, 0.0, 1.0)
    if gamma != 1.0:
        out = out**gamma
    return np.clip(out, 0.0, 1.0)


# -- ChannelStack-level operations --------------------------------------------


def random_flip(
    stack: ChannelStack, mask: VolumeGrid, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()
) -> tuple[ChannelStack, VolumeGrid]:
    """Independently flip each axis with its configured probability."""
    require_same_geometry(stack.geometry, mask)
    flips = tuple(bool(rng.random() < p) for p in config.p_flip)
    arrays = flip_arrays([c.data for c in stack.channels] + [mask.data], flips)
    return stack.replace_channels(arrays[:-1]), mask.with_data(arrays[-1])


def apply_affine(
    stack: ChannelStack,
    mask: VolumeGrid,
    angles_deg: tuple[float, float, float],
    scale: float,
) -> tuple[ChannelStack, VolumeGrid]:
    """Rotate (physical space, about the volume centre) and isotropically scale."""
    require_same_geometry(stack.geometry, mask)
    matrix = affine_index_matrix(angles_deg, scale, stack.spacing)
    center = (np.asarray(stack.shape, dtype=np.float64) - 1.0) / 2.0
    channels = [
        np.clip(affine_transform_array(c.data.astype(np.float32), matrix, 1, center), 0.0, 1.0)
        for c in stack.channels
    ]
    new_mask = affine_transform_array(mask.data, matrix, 0, center)
    return stack.replace_channels(channels), mask.with_data(new_mask)


def random_affine(
    stack: ChannelStack, mask: VolumeGrid, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()
) -> tuple[ChannelStack, VolumeGrid]:
    angles = tuple(rng.uniform(-config.rotation_deg, config.rotation_deg) for _ in range(3))
    scale = float(rng.uniform(*config.scale_range))
    return apply_affine(stack, mask, angles, scale)


def pet_intensity_augment(
    stack: ChannelStack, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()
) -> ChannelStack:
    """Blur/brightness/contrast/gamma on the SUV-derived channels only.

    CT channels pass through untouched (same objects, bit-identical data).
    """
    if tuple(stack.channel_names[: len(STANDARD_CHANNELS)]) != STANDARD_CHANNELS:
        raise ValueError(f"unknown channel layout {stack.channel_names}")
    sigma = float(rng.uniform(*config.pet_blur_sigma_range))
    brightness = float(rng.uniform(*config.pet_brightness_range))
    contrast = float(rng.uniform(*config.pet_contrast_range))
    gamma = float(rng.uniform(*config.pet_gamma_range))
    channels = list(stack.channels)
    for i, name in enumerate(stack.channel_names):
        if name in PET_CHANNEL_NAMES:
            channels[i] = channels[i].with_data(
                pet_transform_array(channels[i].data, sigma, contrast, brightness, gamma)
            )
    return ChannelStack(tuple(channels), stack.channel_names)


def random_spacing_resample(
    case: CaseRecord, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()
) -> CaseRecord:
    """Resample the whole case to one randomly drawn isotropic spacing."""
    s = float(rng.uniform(*config.spacing_jitter_range_mm))
    target = (s, s, s)
    suv = resample(case.suv, target, ResampleMode.LINEAR)
    ct = resample(case.ct, target, ResampleMode.LINEAR)
    gt = (
        resample(case.gt_mask, target, ResampleMode.NEAREST)
        if case.gt_mask is not None
        else None
    )
    return CaseRecord.from_volumes(case.case_id, suv, ct, gt)


# -- crop-level helper for the training loop ----------------------------------


def augment_crop(
    stack_arr: np.ndarray,
    gt_arr: np.ndarray,
    rng: np.random.Generator,
    config: AugmentConfig,
    pet_channels: tuple[int, ...] = (0, 4),
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Flip + (sometimes) affine + PET intensity transform on a (C, X, Y, Z) crop."""
    flips = tuple(bool(rng.random() < p) for p in config.p_flip)
    axes = tuple(i + 1 for i, f in enumerate(flips) if f)
    if axes:
        stack_arr = np.flip(stack_arr, axis=axes)
        gt_arr = np.flip(gt_arr, axis=tuple(a - 1 for a in axes))
    stack_arr = np.ascontiguousarray(stack_arr)
    gt_arr = np.ascontiguousarray(gt_arr)

    if rng.random() < config.affine_prob:
        angles = tuple(rng.uniform(-config.rotation_deg, config.rotation_deg) for _ in range(3))
        scale = float(rng.uniform(*config.scale_range))
        matrix = affine_index_matrix(angles, scale, spacing)
        center = (np.asarray(gt_arr.shape, dtype=np.float64) - 1.0) / 2.0
        stack_arr = np.stack(
            [
                np.clip(affine_transform_array(c, matrix, 1, center), 0.0, 1.0)
                for c in stack_arr
            ]
        )
        gt_arr = affine_transform_array(gt_arr, matrix, 0, center)

    sigma = float(rng.uniform(*config.pet_blur_sigma_range))
    brightness = float(rng.uniform(*config.pet_brightness_range))
    contrast = float(rng.uniform(*config.pet_contrast_range))
    gamma = float(rng.uniform(*config.pet_gamma_range))
    out = np.array(stack_arr, dtype=np.float32, copy=True)
    for c in pet_channels:
        out[c] = pet_transform_array(out[c], sigma, contrast, brightness, gamma)
    return out, gt_arr.astype(np.uint8)
