"""Coarse UNet, native-resolution refiner, and the linear stacking ensemble.

The coarse net keeps the first level at full (6 mm) resolution and halves
each deeper level; the bottleneck uses large 9^3 kernels for long-range
context. Both nets emit 2-channel logits (background, lesion); channel 1
after softmax is the probability map consumed by the ensemble and refiner.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .losses import LossWeights, composite_loss_from_prob
from .volume import VolumeGrid, VolumeKind, require_same_geometry


@dataclass(frozen=True)
class CoarseUNetConfig:
    in_channels: int = 5
    patch_shape: tuple[int, int, int] = (128, 96, 96)
    encoder_channels: tuple[int, ...] = (64, 96, 128, 156)
    middle_kernel: int = 9
    deep_supervision_levels: int = 4
    out_channels: int = 2
    negative_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(p) for p in self.patch_shape))
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        ch = self.encoder_channels
        if len(ch) < 2 or any(a >= b for a, b in zip(ch, ch[1:])):
            raise ValueError("encoder_channels must be strictly increasing, length >= 2")
        down = 2 ** (len(ch) - 1)
        if any(p % down for p in self.patch_shape):
            raise ValueError(f"patch dims {self.patch_shape} must be divisible by {down}")
        if self.middle_kernel % 2 == 0:
            raise ValueError("middle_kernel must be odd")
        if not 1 <= self.deep_supervision_levels <= len(ch):
            raise ValueError("deep_supervision_levels must be in [1, n_levels]")


@dataclass(frozen=True)
class RefinerConfig:
    in_channels: int = 6
    patch_shape: tuple[int, int, int] = (64, 64, 64)
    stem_kernel: int = 9
    width: int = 32
    n_residual_blocks: int = 4
    head_kernel: int = 3
    out_channels: int = 2
    negative_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(p) for p in self.patch_shape))
        if self.n_residual_blocks != 4:
            raise ValueError("refiner uses exactly 4 residual blocks")
        if any(k % 2 == 0 for k in (self.stem_kernel, self.head_kernel)):
            raise ValueError("kernels must be odd")
        if self.width < 1:
            raise ValueError("width must be >= 1")


def _conv_block(cin: int, cout: int, kernel: int = 3, stride: int = 1, slope: float = 0.01):
    pad = kernel // 2
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel, stride=stride, padding=pad),
        nn.InstanceNorm3d(cout),
        nn.LeakyReLU(slope, inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.InstanceNorm3d(cout),
        nn.LeakyReLU(slope, inplace=True),
    )


class CoarseUNet(nn.Module):
    """UNet over the 6 mm five-channel stack, with deep-supervision heads.

    forward returns ``(logits, ds_logits)`` where ``ds_logits[k]`` sits at
    scale 1/2^k and ``ds_logits[0]`` is the main full-resolution logits.
    """

    def __init__(self, config: CoarseUNetConfig = CoarseUNetConfig()):
        super().__init__()
        self.config = config
        ch = config.encoder_channels
        slope = config.negative_slope
        self.encoders = nn.ModuleList(
            [_conv_block(config.in_channels, ch[0], stride=1, slope=slope)]
            + [
                _conv_block(ch[i - 1], ch[i], stride=2, slope=slope)
                for i in range(1, len(ch))
            ]
        )
        mk = config.middle_kernel
        self.middle = nn.Sequential(
            nn.Conv3d(ch[-1], ch[-1], mk, padding=mk // 2),
            nn.InstanceNorm3d(ch[-1]),
            nn.LeakyReLU(slope, inplace=True),
            nn.Conv3d(ch[-1], ch[-1], mk, padding=mk // 2),
            nn.InstanceNorm3d(ch[-1]),
            nn.LeakyReLU(slope, inplace=True),
        )
        self.ups = nn.ModuleList(
            [nn.ConvTranspose3d(ch[i], ch[i - 1], 2, stride=2) for i in range(len(ch) - 1, 0, -1)]
        )
        self.decoders = nn.ModuleList(
            [_conv_block(2 * ch[i - 1], ch[i - 1], slope=slope) for i in range(len(ch) - 1, 0, -1)]
        )
        self.head = nn.Conv3d(ch[0], config.out_channels, 1)
        # aux head for ds level k (k=1..levels-1) sees features at scale 1/2^k
        self.aux_heads = nn.ModuleList(
            [
                nn.Conv3d(ch[k], config.out_channels, 1)
                for k in range(1, config.deep_supervision_levels)
            ]
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        unbatched = x.dim() == 4
        if unbatched:
            x = x.unsqueeze(0)
        expected = (self.config.in_channels, *self.config.patch_shape)
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input {expected}, got {tuple(x.shape[1:])}")
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
        h = self.middle(h)
        # features at scale 1/2^k: middle at the deepest level, then decoder outputs
        scale = len(self.encoders) - 1
        scale_feats = {scale: h}
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips[:-1])):
            h = dec(torch.cat([up(h), skip], dim=1))
            scale -= 1
            scale_feats[scale] = h
        logits = self.head(h)
        ds = [logits]
        for k, head in enumerate(self.aux_heads, start=1):
            ds.append(head(scale_feats[k]))
        if unbatched:
            logits = logits.squeeze(0)
            ds = [logits] + [t.squeeze(0) for t in ds[1:]]
        return logits, ds


class _ResidualBlock(nn.Module):
    def __init__(self, width: int, slope: float):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(width, width, 3, padding=1),
            nn.LeakyReLU(slope, inplace=False),
            nn.InstanceNorm3d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class Refiner(nn.Module):
    """Native-resolution refiner: 9^3 stem, 4 residual blocks, 3^3 head."""

    def __init__(self, config: RefinerConfig = RefinerConfig()):
        super().__init__()
        self.config = config
        sk = config.stem_kernel
        self.stem = nn.Sequential(
            nn.Conv3d(config.in_channels, config.width, sk, padding=sk // 2),
            nn.LeakyReLU(config.negative_slope, inplace=True),
            nn.InstanceNorm3d(config.width),
        )
        self.blocks = nn.Sequential(
            *[_ResidualBlock(config.width, config.negative_slope) for _ in range(config.n_residual_blocks)]
        )
        self.head = nn.Conv3d(config.width, config.out_channels, config.head_kernel, padding=config.head_kernel // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        unbatched = x.dim() == 4
        if unbatched:
            x = x.unsqueeze(0)
        expected = (self.config.in_channels, *self.config.patch_shape)
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input {expected}, got {tuple(x.shape[1:])}")
        out = self.head(self.blocks(self.stem(x)))
        return out.squeeze(0) if unbatched else out


@dataclass(frozen=True)
class StackingWeights:
    """Non-negative linear blend of member probability maps plus a bias."""

    w: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if w.size < 1:
            raise ValueError("need at least one weight")
        if (w < 0).any():
            raise ValueError("stacking weights must be non-negative")
        w.flags.writeable = False
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "bias", float(self.bias))

    def to_json(self) -> str:
        return json.dumps({"w": [float(x) for x in self.w], "bias": self.bias})

    @classmethod
    def from_json(cls, text: str) -> "StackingWeights":
        payload = json.loads(text)
        return cls(np.asarray(payload["w"], dtype=np.float64), float(payload["bias"]))


def combine_probability_arrays(maps: np.ndarray, weights: StackingWeights) -> np.ndarray:
    """clamp(sum_i w_i * p_i + bias, 0, 1) over a stacked (M, ...) array."""
    if maps.shape[0] != weights.w.size:
        raise ValueError(f"{maps.shape[0]} maps but {weights.w.size} weights")
    out = np.tensordot(weights.w, maps, axes=1) + weights.bias
    return np.clip(out, 0.0, 1.0)


def ensemble_combine(prob_maps: Sequence[VolumeGrid], weights: StackingWeights) -> VolumeGrid:
    """Linearly weighted, clamped blend of geometry-identical probability grids."""
    if len(prob_maps) < 2:
        raise ValueError("ensemble needs at least 2 probability maps")
    require_same_geometry(*prob_maps)
    for g in prob_maps:
        if g.kind is not VolumeKind.PROBABILITY:
            raise ValueError("ensemble inputs must be PROBABILITY grids")
    stacked = np.stack([g.data.astype(np.float64) for g in prob_maps], axis=0)
    out = combine_probability_arrays(stacked, weights)
    geo = prob_maps[0]
    return VolumeGrid(out.astype(np.float32), geo.spacing, geo.origin, VolumeKind.PROBABILITY)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, VolumeGrid) else np.asarray(x)


def stacking_calibration_loss(
    member_preds: Sequence[Sequence],
    targets: Sequence,
    weights: StackingWeights,
    loss_weights: LossWeights = LossWeights(),
) -> float:
    """Mean composite loss of the blended map over the calibration cases."""
    w = torch.from_numpy(np.array(weights.w, dtype=np.float64))
    b = torch.tensor(float(weights.bias), dtype=torch.float64)
    losses = []
    for i, target in enumerate(targets):
        p = torch.from_numpy(
            np.stack([_as_array(m[i]).astype(np.float64) for m in member_preds])
        )
        g = torch.from_numpy(_as_array(target).astype(np.float64))
        blend = torch.clamp(torch.tensordot(w, p, dims=1) + b, 0.0, 1.0)
        losses.append(composite_loss_from_prob(blend, g, loss_weights))
    return float(torch.stack(losses).mean())


def fit_stacking_weights(
    member_preds: Sequence[Sequence],
    targets: Sequence,
    loss_weights: LossWeights = LossWeights(),
    iters: int = 300,
    lr: float = 0.05,
    seed: int = 0,
) -> StackingWeights:
    """Fit non-negative blend weights + bias by projected gradient descent.

    Runs Adam from a uniform start and from one selector start per member
    (weight 1 on that member), clamping weights to >= 0 after each step, and
    returns the best point ever evaluated. Selector feasibility guarantees the
    fitted calibration loss never exceeds any single member's.
    """
    n_members = len(member_preds)
    n_cases = len(targets)
    if n_cases == 0:
        raise ValueError("empty calibration set")
    if any(len(m) != n_cases for m in member_preds):
        raise ValueError("every member needs a prediction per calibration case")
    torch.manual_seed(seed)
    stacked = [
        torch.from_numpy(
            np.stack([_as_array(m[i]).astype(np.float64) for m in member_preds])
        )
        for i in range(n_cases)
    ]
    gts = [torch.from_numpy(_as_array(t).astype(np.float64)) for t in targets]

    def objective(w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        per_case = [
            composite_loss_from_prob(
                torch.clamp(torch.tensordot(w, p, dims=1) + b, 0.0, 1.0), g, loss_weights
            )
            for p, g in zip(stacked, gts)
        ]
        return torch.stack(per_case).mean()

    starts = [np.full(n_members, 1.0 / n_members)]
    starts += [np.eye(n_members)[i] for i in range(n_members)]

    best: tuple[float, np.ndarray, float] | None = None
    for start in starts:
        w = torch.tensor(start, dtype=torch.float64, requires_grad=True)
        b = torch.zeros((), dtype=torch.float64, requires_grad=True)
        opt = torch.optim.Adam([w, b], lr=lr)
        for it in range(iters + 1):
            with torch.no_grad():
                score = float(objective(w.clamp(min=0.0), b))
                if best is None or score < best[0]:
                    best = (score, w.detach().clamp(min=0.0).numpy().copy(), float(b))
            if it == iters:
                break
            opt.zero_grad()
            loss = objective(w, b)
            loss.backward()
            opt.step()
            with torch.no_grad():
                w.clamp_(min=0.0)
    assert best is not None
    return StackingWeights(best[1], best[2])


# -- checkpoint plumbing ------------------------------------------------------

_NET_KINDS = {"coarse_unet": (CoarseUNetConfig, CoarseUNet), "refiner": (RefinerConfig, Refiner)}


def _config_json(config) -> str:
    return json.dumps(asdict(config), sort_keys=True)


def save_checkpoint(path: str | Path, net: nn.Module, extra: dict | None = None) -> None:
    """Atomic write of named parameters with the net config (and its hash) embedded."""
    kind = "coarse_unet" if isinstance(net, CoarseUNet) else "refiner"
    cfg_json = _config_json(net.config)
    payload = {
        "kind": kind,
        "config_json": cfg_json,
        "config_sha256": hashlib.sha256(cfg_json.encode()).hexdigest(),
        "state_dict": {k: v.cpu() for k, v in net.state_dict().items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, device: str = "cpu") -> tuple[nn.Module, dict]:
    """Rebuild a net from a checkpoint, validating the embedded config hash."""
    payload = torch.load(Path(path), map_location=device, weights_only=False)
    kind = payload.get("kind")
    if kind not in _NET_KINDS:
        raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")
    cfg_json = payload["config_json"]
    digest = hashlib.sha256(cfg_json.encode()).hexdigest()
    if digest != payload["config_sha256"]:
        raise ValueError(f"{path}: config hash mismatch; checkpoint corrupt or tampered")
    cfg_cls, net_cls = _NET_KINDS[kind]
    net = net_cls(cfg_cls(**json.loads(cfg_json)))
    net.load_state_dict(payload["state_dict"])
    net.to(device)
    net.eval()
    return net, payload.get("extra", {})
