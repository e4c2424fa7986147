"""Composite segmentation objective: dice + 0.5 * cross-entropy + 2 * sensitivity.

All terms are differentiable torch ops. Probabilities/targets may carry a
leading batch axis or not; sums run over every element ("batch-summed" dice),
which keeps gradients meaningful for very small lesions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    dice_w: float = 1.0
    ce_w: float = 0.5
    sens_w: float = 2.0
    epsilon: float = 1e-5

    def __post_init__(self):
        if min(self.dice_w, self.ce_w, self.sens_w) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"geometry mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def soft_dice_loss(prob: torch.Tensor, gt: torch.Tensor, epsilon: float = 1e-5) -> torch.Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), summed over all voxels."""
    _check_same_shape(prob, gt)
    g = gt.to(prob.dtype)
    inter = (prob * g).sum()
    denom = prob.sum() + g.sum()
    return 1.0 - (2.0 * inter + epsilon) / (denom + epsilon)


def sensitivity_loss(prob: torch.Tensor, gt: torch.Tensor, epsilon: float = 1e-5) -> torch.Tensor:
    """Soft false-negative rate 1 - sum(p*g)/sum(g); 0 when gt is empty.

    Has zero derivative w.r.t. predictions outside the ground truth, so it
    rewards recall without penalizing (or constraining) false positives.
    """
    _check_same_shape(prob, gt)
    g = gt.to(prob.dtype)
    inter = (prob * g).sum()
    return 1.0 - (inter + epsilon) / (g.sum() + epsilon)


def cross_entropy_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Voxel-mean 2-class cross entropy.

    Accepts unbatched (2, X, Y, Z) logits with (X, Y, Z) targets or batched
    (B, 2, X, Y, Z) with (B, X, Y, Z).
    """
    if logits.dim() == 4:
        logits = logits.unsqueeze(0)
        gt = gt.unsqueeze(0)
    if logits.dim() != 5 or gt.dim() != 4 or logits.shape[0] != gt.shape[0] or logits.shape[2:] != gt.shape[1:]:
        raise ValueError(
            f"geometry mismatch: logits {tuple(logits.shape)} vs gt {tuple(gt.shape)}"
        )
    return F.cross_entropy(logits, gt.long())


def lesion_probability(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the 2-channel axis, returning the lesion (channel-1) map."""
    ch_axis = 0 if logits.dim() == 4 else 1
    return torch.softmax(logits, dim=ch_axis).select(ch_axis, 1)


def composite_loss_from_prob(
    prob: torch.Tensor, gt: torch.Tensor, weights: LossWeights = LossWeights()
) -> torch.Tensor:
    """Composite loss driven by a probability map instead of logits.

    The cross-entropy term uses the exact log-likelihood of the probability,
    clamped away from {0, 1} for finiteness; used by the ensemble stacking fit
    where only blended probabilities exist.
    """
    _check_same_shape(prob, gt)
    g = gt.to(prob.dtype)
    p = prob.clamp(1e-7, 1.0 - 1e-7)
    ce = -(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)).mean()
    return (
        weights.dice_w * soft_dice_loss(prob, gt, weights.epsilon)
        + weights.ce_w * ce
        + weights.sens_w * sensitivity_loss(prob, gt, weights.epsilon)
    )


def deep_supervision_scale_weights(n_scales: int) -> list[float]:
    """Per-scale weights 2^-k (k=0 the full-resolution output), normalized to sum 1."""
    raw = [0.5**k for k in range(n_scales)]
    total = sum(raw)
    return [w / total for w in raw]


def _downsample_gt_to(gt: torch.Tensor, spatial: torch.Size) -> torch.Tensor:
    if gt.shape[-3:] == spatial:
        return gt
    g = gt.to(torch.float32)
    unbatched = g.dim() == 3
    if unbatched:
        g = g.unsqueeze(0)
    g = F.interpolate(g.unsqueeze(1), size=spatial, mode="nearest").squeeze(1)
    if unbatched:
        g = g.squeeze(0)
    return g


def combined_loss(
    logits: torch.Tensor,
    ds_logits: Sequence[torch.Tensor] | None,
    gt: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Deep-supervised composite loss.

    ``ds_logits`` is the full supervision pyramid with scale 1/2^k at index k;
    index 0 is the main output (pass None for single-scale training). The
    ground truth is NEAREST-downsampled to each scale.
    """
    pyramid = list(ds_logits) if ds_logits else [logits]
    scale_w = deep_supervision_scale_weights(len(pyramid))
    total = logits.new_zeros(())
    for w, lg in zip(scale_w, pyramid):
        g = _downsample_gt_to(gt, lg.shape[-3:])
        prob = lesion_probability(lg)
        term = (
            weights.dice_w * soft_dice_loss(prob, g, weights.epsilon)
            + weights.ce_w * cross_entropy_loss(lg, g)
            + weights.sens_w * sensitivity_loss(prob, g, weights.epsilon)
        )
        total = total + w * term
    return total
