"""The prediction cascade: 6 mm ensemble, upsample, refiner sliding window.

Whole-body volumes exceed the fixed patch shapes, so both stages run tiled
sliding-window inference with Gaussian-weighted blending of overlapping patch
predictions.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .losses import lesion_probability
from .nets import StackingWeights, ensemble_combine, load_checkpoint, save_checkpoint
from .preprocess import ChannelStack, append_coarse_mask, build_channel_stack
from .volume import CaseRecord, ResampleMode, VolumeGrid, VolumeKind, resample, resample_like


@lru_cache(maxsize=8)
def gaussian_importance(patch_shape: tuple[int, ...], sigma_scale: float = 0.125) -> np.ndarray:
    """Separable Gaussian patch weighting, sigma = dim * sigma_scale, peak 1."""
    weight = np.ones(patch_shape, dtype=np.float64)
    for axis, n in enumerate(patch_shape):
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        sigma = max(n * sigma_scale, 1e-6)
        g = np.exp(-0.5 * (x / sigma) ** 2)
        shape = [1] * len(patch_shape)
        shape[axis] = n
        weight = weight * g.reshape(shape)
    return np.maximum(weight, 1e-6).astype(np.float32)


def tile_positions(size: int, patch: int, stride: int) -> list[int]:
    if size <= patch:
        return [0]
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def sliding_window_predict(
    model: Callable[[torch.Tensor], torch.Tensor],
    stack: ChannelStack,
    patch_shape: tuple[int, int, int],
    overlap: float = 0.5,
    device: str = "cpu",
) -> VolumeGrid:
    """Tiled lesion-probability prediction over an arbitrarily sized stack.

    The volume is edge-padded up to the patch shape if needed, tiled with
    stride patch * (1 - overlap), and overlapping patch outputs are averaged
    with Gaussian weights. Output geometry equals the input geometry.
    """
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    patch = tuple(int(p) for p in patch_shape)
    if any(p < 1 for p in patch):
        raise ValueError(f"invalid patch shape {patch_shape}")
    expected = getattr(getattr(model, "config", None), "in_channels", None)
    if expected is not None and len(stack.channels) != expected:
        raise ValueError(f"model expects {expected} channels, stack has {len(stack.channels)}")

    arr = stack.as_array()
    orig_shape = arr.shape[1:]
    pads = [(0, max(0, p - s)) for p, s in zip(patch, orig_shape)]
    if any(hi for _, hi in pads):
        arr = np.pad(arr, [(0, 0)] + pads, mode="edge")
    padded = arr.shape[1:]

    weight = gaussian_importance(patch)
    acc = np.zeros(padded, dtype=np.float64)
    norm = np.zeros(padded, dtype=np.float64)
    strides = [max(1, int(round(p * (1.0 - overlap)))) for p in patch]
    positions = [tile_positions(n, p, s) for n, p, s in zip(padded, patch, strides)]

    dev = torch.device(device)
    with torch.no_grad():
        for sx in positions[0]:
            for sy in positions[1]:
                for sz in positions[2]:
                    sl = (
                        slice(None),
                        slice(sx, sx + patch[0]),
                        slice(sy, sy + patch[1]),
                        slice(sz, sz + patch[2]),
                    )
                    x = torch.from_numpy(np.ascontiguousarray(arr[sl])).unsqueeze(0).to(dev)
                    out = model(x)
                    logits = out[0] if isinstance(out, tuple) else out
                    prob = lesion_probability(logits.squeeze(0)).cpu().numpy()
                    region = sl[1:]
                    acc[region] += prob * weight
                    norm[region] += weight
    prob = acc / norm
    crop = tuple(slice(0, n) for n in orig_shape)
    out = np.clip(prob[crop], 0.0, 1.0).astype(np.float32)
    geo = stack.geometry
    return VolumeGrid(out, geo.spacing, geo.origin, VolumeKind.PROBABILITY)


def binarize(prob: VolumeGrid, threshold: float) -> VolumeGrid:
    """Strict thresholding: voxel is foreground iff p > threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if prob.kind is not VolumeKind.PROBABILITY:
        raise ValueError("binarize expects a PROBABILITY grid")
    return VolumeGrid(
        (prob.data > threshold).astype(np.uint8), prob.spacing, prob.origin, VolumeKind.BINARY_MASK
    )


@dataclass(frozen=True)
class PipelineBundle:
    """Frozen cascade: coarse members + stacking weights + refiner + knobs."""

    members: tuple
    stacking: StackingWeights
    refiner: object
    threshold: float = 0.5
    overlap: float = 0.5
    coarse_spacing_mm: float = 6.0
    device: str = "cpu"

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if len(self.members) != self.stacking.w.size:
            raise ValueError(
                f"{len(self.members)} members but {self.stacking.w.size} stacking weights"
            )

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, net in enumerate(self.members):
            save_checkpoint(directory / f"coarse_{i}.pt", net)
        save_checkpoint(directory / "refiner.pt", self.refiner)
        (directory / "stacking.json").write_text(self.stacking.to_json())
        meta = {
            "threshold": self.threshold,
            "overlap": self.overlap,
            "coarse_spacing_mm": self.coarse_spacing_mm,
            "n_members": len(self.members),
        }
        (directory / "pipeline.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path, device: str = "cpu") -> "PipelineBundle":
        directory = Path(directory)
        meta = json.loads((directory / "pipeline.json").read_text())
        members = tuple(
            load_checkpoint(directory / f"coarse_{i}.pt", device)[0]
            for i in range(int(meta["n_members"]))
        )
        refiner, _ = load_checkpoint(directory / "refiner.pt", device)
        stacking = StackingWeights.from_json((directory / "stacking.json").read_text())
        return cls(
            members,
            stacking,
            refiner,
            threshold=float(meta["threshold"]),
            overlap=float(meta["overlap"]),
            coarse_spacing_mm=float(meta["coarse_spacing_mm"]),
            device=device,
        )


def predict_coarse_prob(
    case: CaseRecord,
    members: Sequence,
    stacking: StackingWeights,
    overlap: float = 0.5,
    coarse_spacing_mm: float = 6.0,
    device: str = "cpu",
) -> tuple[VolumeGrid, VolumeGrid]:
    """(native-grid, 6 mm-grid) combined coarse probability for a case."""
    target = (coarse_spacing_mm,) * 3
    suv = resample(case.suv, target, ResampleMode.LINEAR)
    ct = resample(case.ct, target, ResampleMode.LINEAR)
    stack = build_channel_stack(suv, ct)
    probs = [
        sliding_window_predict(m, stack, m.config.patch_shape, overlap, device) for m in members
    ]
    combined = ensemble_combine(probs, stacking)
    native = resample_like(combined, case.suv, ResampleMode.LINEAR)
    return native, combined


@dataclass(frozen=True)
class PipelineResult:
    case_id: str
    mask: VolumeGrid
    prob: VolumeGrid
    coarse_prob_native: VolumeGrid
    runtime_seconds: float

    @property
    def mtv_voxels(self) -> int:
        return int(self.mask.data.sum())

    @property
    def mtv_ml(self) -> float:
        return self.mtv_voxels * self.mask.voxel_volume_mm3 / 1000.0

    def summary(self) -> dict:
        return {
            "case_id": self.case_id,
            "runtime_seconds": self.runtime_seconds,
            "mtv_voxels": self.mtv_voxels,
            "mtv_ml": self.mtv_ml,
        }


def run_pipeline(case: CaseRecord, bundle: PipelineBundle) -> PipelineResult:
    """Full cascade on one case; the output mask shares the input SUV geometry."""
    t0 = time.perf_counter()
    coarse_native, _ = predict_coarse_prob(
        case,
        bundle.members,
        bundle.stacking,
        bundle.overlap,
        bundle.coarse_spacing_mm,
        bundle.device,
    )
    stack6 = append_coarse_mask(build_channel_stack(case.suv, case.ct), coarse_native)
    prob = sliding_window_predict(
        bundle.refiner, stack6, bundle.refiner.config.patch_shape, bundle.overlap, bundle.device
    )
    mask = binarize(prob, bundle.threshold)
    runtime = time.perf_counter() - t0
    return PipelineResult(case.case_id, mask, prob, coarse_native, runtime)
