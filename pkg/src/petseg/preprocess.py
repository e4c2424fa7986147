"""Intensity windowing and the 5-channel model input stack.

The windows mirror the ranges a reader would use: full-range SUV, general CT,
soft-tissue CT, lung CT, and a "hot" SUV band that emphasizes mid-range
lesion uptake. Values outside a window clamp to its ends. Channel order is
fixed and is part of the model contract; the refiner appends the coarse
probability map as a sixth channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume import VolumeGrid, VolumeKind, require_same_geometry

# (source, lo, hi) per channel, in the fixed model order
CHANNEL_WINDOWS: tuple[tuple[str, str, float, float], ...] = (
    ("SUV", "suv", 0.0, 30.0),
    ("CT", "ct", -150.0, 300.0),
    ("CT_Soft", "ct", -100.0, 100.0),
    ("CT_Lung", "ct", -1000.0, -200.0),
    ("SUV_hot", "suv", 2.0, 10.0),
)
STANDARD_CHANNELS = tuple(name for name, *_ in CHANNEL_WINDOWS)
COARSE_MASK_CHANNEL = "COARSE_MASK"


def window_normalize(grid: VolumeGrid, lo: float, hi: float) -> VolumeGrid:
    """Map intensities linearly from (lo, hi) to (0, 1), clamping outside values."""
    if not lo < hi:
        raise ValueError(f"window requires lo < hi, got ({lo}, {hi})")
    out = np.clip((grid.data.astype(np.float32) - lo) / (hi - lo), 0.0, 1.0)
    return VolumeGrid(out, grid.spacing, grid.origin, VolumeKind.PROBABILITY)


@dataclass(frozen=True)
class ChannelStack:
    """Ordered multi-channel normalized volume sharing one geometry."""

    channels: tuple[VolumeGrid, ...]
    channel_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.channels) != len(self.channel_names):
            raise ValueError("channels and channel_names lengths differ")
        if not self.channels:
            raise ValueError("empty stack")
        require_same_geometry(*self.channels)
        for g in self.channels:
            if g.kind is not VolumeKind.PROBABILITY:
                raise ValueError("stack channels must be normalized PROBABILITY grids")

    @property
    def geometry(self) -> VolumeGrid:
        return self.channels[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.channels[0].shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.channels[0].spacing

    def as_array(self) -> np.ndarray:
        """(C, X, Y, Z) float32 view for model input."""
        return np.stack([c.data.astype(np.float32) for c in self.channels], axis=0)

    def replace_channels(self, arrays: Sequence[np.ndarray]) -> "ChannelStack":
        """Same names/geometry, new per-channel values (clamped to [0, 1] upstream)."""
        if len(arrays) != len(self.channels):
            raise ValueError("channel count mismatch")
        geo = self.channels[0]
        return ChannelStack(
            tuple(
                VolumeGrid(a, geo.spacing, geo.origin, VolumeKind.PROBABILITY) for a in arrays
            ),
            self.channel_names,
        )

    def append(self, grid: VolumeGrid, name: str) -> "ChannelStack":
        return ChannelStack(self.channels + (grid,), self.channel_names + (name,))


def build_channel_stack(suv: VolumeGrid, ct: VolumeGrid) -> ChannelStack:
    """The standard 5-channel input stack from aligned SUV and CT grids."""
    if suv.kind is not VolumeKind.SUV or ct.kind is not VolumeKind.HU:
        raise ValueError("expected (SUV, HU) grids")
    require_same_geometry(suv, ct)
    sources = {"suv": suv, "ct": ct}
    channels = tuple(
        window_normalize(sources[src], lo, hi) for _, src, lo, hi in CHANNEL_WINDOWS
    )
    return ChannelStack(channels, STANDARD_CHANNELS)


def append_coarse_mask(stack: ChannelStack, coarse_prob: VolumeGrid) -> ChannelStack:
    """Refiner input: the standard stack plus the coarse probability channel."""
    if stack.channel_names != STANDARD_CHANNELS:
        raise ValueError("coarse mask may only be appended to the standard 5-channel stack")
    require_same_geometry(stack.geometry, coarse_prob)
    if coarse_prob.kind is not VolumeKind.PROBABILITY:
        raise ValueError("coarse channel must be a PROBABILITY grid")
    return stack.append(coarse_prob, COARSE_MASK_CHANNEL)
