"""Stratified splitting, the warm-restart schedule, and the training loops.

Three separately trained stages: coarse UNet members on different fold
windows of the development data, the stacking fit on cases unseen by every
member, and the native-resolution refiner fed by the frozen coarse ensemble.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .augment import AugmentConfig, augment_crop
from .losses import LossWeights, combined_loss, lesion_probability
from .nets import CoarseUNet, CoarseUNetConfig, Refiner, RefinerConfig, StackingWeights
from .preprocess import build_channel_stack
from .volume import CaseRecord, ResampleMode, VolumeGrid, patient_id_of, resample


# -- stratified splits ---------------------------------------------------------


@dataclass(frozen=True)
class CaseSummary:
    """The split-relevant view of a case: id plus the stratification keys."""

    case_id: str
    lesion_volume_ml: float
    lesion_count: int


@dataclass(frozen=True)
class SplitPlan:
    test_ids: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]
    stratify_keys: dict[str, tuple[float, int]]

    def __post_init__(self):
        seen: set[str] = set()
        for group in (self.test_ids, *self.folds):
            for cid in group:
                if cid in seen:
                    raise ValueError(f"case {cid} assigned twice")
                seen.add(cid)

    @property
    def dev_ids(self) -> tuple[str, ...]:
        return tuple(cid for fold in self.folds for cid in fold)

    def all_ids(self) -> tuple[str, ...]:
        return self.test_ids + self.dev_ids

    def to_json(self) -> str:
        return json.dumps(
            {
                "test_ids": list(self.test_ids),
                "folds": [list(f) for f in self.folds],
                "stratify_keys": {k: [v[0], v[1]] for k, v in self.stratify_keys.items()},
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        payload = json.loads(text)
        return cls(
            tuple(payload["test_ids"]),
            tuple(tuple(f) for f in payload["folds"]),
            {k: (float(v[0]), int(v[1])) for k, v in payload["stratify_keys"].items()},
        )


def make_stratified_splits(
    cases: Sequence,
    k: int = 15,
    test_fraction: float = 0.1,
    seed: int = 0,
    patient_key: Callable[[str], str] = patient_id_of,
) -> SplitPlan:
    """Volume/count-stratified k folds plus a test split, grouped by patient.

    All of a patient's studies land in the same split. Units (patients) are
    sorted by (total lesion volume, total lesion count) and dealt stratum by
    stratum: the test split takes one unit from each of n_test contiguous
    strata, then each remaining stratum of k units is shuffled and dealt
    round-robin, one per fold.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    units: dict[str, list] = {}
    for c in cases:
        units.setdefault(patient_key(c.case_id), []).append(c)
    if k > len(units):
        raise ValueError(f"k={k} exceeds the {len(units)} available patients")

    rng = np.random.default_rng(seed)

    def unit_key(item):
        _, cs = item
        return (
            sum(c.lesion_volume_ml for c in cs),
            sum(c.lesion_count for c in cs),
        )

    # seeded shuffle first so that key ties land in random order under the
    # stable sort; dealing below is then deterministic in the sorted order
    items = list(units.items())
    rng.shuffle(items)
    ordered = sorted(items, key=unit_key, reverse=True)
    n_test = int(round(len(ordered) * test_fraction))
    test_units: list = []
    remaining: list = []
    if n_test == 0:
        remaining = list(ordered)
    else:
        for stratum in np.array_split(np.arange(len(ordered)), n_test):
            idx = list(stratum)
            pick = idx[int(rng.integers(len(idx)))]
            for i in idx:
                (test_units if i == pick else remaining).append(ordered[i])

    # largest-first balanced dealing: each unit goes to the currently lightest
    # fold among those with the fewest units. The unit-count constraint makes
    # this exactly one-per-stratum round-robin, while the volume tiebreak
    # counterbalances fold sums so long-tailed cohorts stay mean-balanced.
    folds: list[list[str]] = [[] for _ in range(k)]
    fold_units = [0] * k
    fold_volume = [0.0] * k
    for pid, cs in remaining:
        f = min(range(k), key=lambda i: (fold_units[i], fold_volume[i], i))
        folds[f].extend(c.case_id for c in cs)
        fold_units[f] += 1
        fold_volume[f] += sum(c.lesion_volume_ml for c in cs)

    keys = {c.case_id: (float(c.lesion_volume_ml), int(c.lesion_count)) for c in cases}
    return SplitPlan(
        tuple(c.case_id for _, cs in test_units for c in cs),
        tuple(tuple(f) for f in folds),
        keys,
    )


def member_fold_assignment(
    plan: SplitPlan, member: int, n_members: int, train_folds_per_member: int | None = None
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """(train_ids, val_ids) for one ensemble member.

    Member i trains on a contiguous window of folds starting at i * step with
    step = ceil(k / n_members); by default the window spans k - step folds
    (the 15-fold, 4-member case trains on folds {i..i+10} rotating by 4).
    """
    k = len(plan.folds)
    step = math.ceil(k / n_members)
    t = train_folds_per_member if train_folds_per_member is not None else k - step
    if not 1 <= t < k:
        raise ValueError(f"train folds per member must be in [1, {k - 1}], got {t}")
    train_folds = {(member * step + j) % k for j in range(t)}
    train = tuple(cid for f in sorted(train_folds) for cid in plan.folds[f])
    val = tuple(cid for f in range(k) if f not in train_folds for cid in plan.folds[f])
    return train, val


def shared_calibration_ids(
    plan: SplitPlan, n_members: int, train_folds_per_member: int | None = None
) -> tuple[str, ...]:
    """Dev cases unseen by every member: the legal stacking calibration set."""
    seen: set[str] = set()
    for m in range(n_members):
        train, _ = member_fold_assignment(plan, m, n_members, train_folds_per_member)
        seen.update(train)
    return tuple(cid for cid in plan.dev_ids if cid not in seen)


# -- optimizer / schedule -------------------------------------------------------


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-6
    period_epochs: float = 200.0
    period_decay: float = 0.9
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if min(self.lr, self.weight_decay, self.period_epochs, self.period_decay, self.grad_clip_norm) <= 0:
            raise ValueError("all optimizer parameters must be positive")
        if self.period_decay > 1.0:
            raise ValueError("period_decay must be <= 1")


def lr_at(epoch: float, cfg: OptimConfig = OptimConfig()) -> float:
    """Decayed cosine warm restarts: peak lr * decay^i, cosine within each period."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    period = int(epoch // cfg.period_epochs)
    phase = (epoch % cfg.period_epochs) / cfg.period_epochs
    return cfg.lr * (cfg.period_decay**period) * 0.5 * (1.0 + math.cos(math.pi * phase))


@dataclass(frozen=True)
class TrainLoopConfig:
    epochs: int = 10
    steps_per_epoch: int = 30
    batch_size: int = 2
    fg_oversample_prob: float = 0.5
    augment: bool = True
    coarse_spacing_mm: float = 6.0
    device: str = "cpu"
    seed: int = 0
    # refiner-only knobs
    spacing_variants: int = 2
    spacing_variant_prob: float = 0.5

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch, batch_size must be >= 1")
        if not 0.0 <= self.fg_oversample_prob <= 1.0:
            raise ValueError("fg_oversample_prob must be in [0, 1]")


@dataclass
class TrainResult:
    net: torch.nn.Module
    history: list[dict]
    best_epoch: int
    best_val_loss: float


# -- data preparation ------------------------------------------------------------


def _cache_dir() -> Path | None:
    root = os.environ.get("PETSEG_CACHE")
    return Path(root) if root else None


def coarse_case_arrays(case: CaseRecord, spacing_mm: float) -> tuple[np.ndarray, np.ndarray]:
    """(5, X, Y, Z) windowed stack and (X, Y, Z) uint8 gt at the coarse spacing."""
    cache = _cache_dir()
    key = None
    if cache is not None:
        sig = f"{case.case_id}|{spacing_mm}|{case.suv.shape}|{case.suv.spacing}"
        key = cache / f"coarse_{hashlib.sha1(sig.encode()).hexdigest()}.npz"
        if key.exists():
            payload = np.load(key)
            return payload["stack"], payload["gt"]
    target = (spacing_mm,) * 3
    suv = resample(case.suv, target, ResampleMode.LINEAR)
    ct = resample(case.ct, target, ResampleMode.LINEAR)
    stack = build_channel_stack(suv, ct).as_array()
    if case.gt_mask is not None:
        gt = resample(case.gt_mask, target, ResampleMode.NEAREST).data.astype(np.uint8)
    else:
        gt = np.zeros(suv.shape, dtype=np.uint8)
    if key is not None:
        key.parent.mkdir(parents=True, exist_ok=True)
        tmp = key.with_name(key.name + f".{os.getpid()}.tmp")
        np.savez_compressed(tmp, stack=stack, gt=gt)
        tmp.replace(key)
    return stack, gt


def _pad_to_patch(stack: np.ndarray, gt: np.ndarray, patch: tuple[int, int, int]):
    pads = [(0, max(0, p - s)) for p, s in zip(patch, gt.shape)]
    if any(hi for _, hi in pads):
        stack = np.pad(stack, [(0, 0)] + pads, mode="edge")
        gt = np.pad(gt, pads, mode="constant")
    return stack, gt


def sample_crop(
    stack: np.ndarray,
    gt: np.ndarray,
    patch: tuple[int, int, int],
    rng: np.random.Generator,
    fg_prob: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Random patch, centred on a foreground voxel with probability fg_prob."""
    stack, gt = _pad_to_patch(stack, gt, patch)
    shape = gt.shape
    use_fg = rng.random() < fg_prob and gt.any()
    if use_fg:
        fg = np.argwhere(gt > 0)
        center = fg[int(rng.integers(len(fg)))]
    else:
        center = np.array([rng.integers(n) for n in shape])
    start = [
        int(np.clip(c - p // 2, 0, n - p)) for c, p, n in zip(center, patch, shape)
    ]
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
    return stack[(slice(None),) + sl].copy(), gt[sl].copy()


# -- shared loop machinery --------------------------------------------------------


def _global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().norm() ** 2)
    return math.sqrt(total)


def _train_epochs(
    net: torch.nn.Module,
    batches: Callable[[np.random.Generator], tuple[torch.Tensor, torch.Tensor]],
    validate: Callable[[torch.nn.Module], tuple[float, float | None]],
    optim_cfg: OptimConfig,
    loop: TrainLoopConfig,
    loss_weights: LossWeights,
    deep_supervision: bool,
    log_path: str | Path | None = None,
) -> TrainResult:
    device = torch.device(loop.device)
    net.to(device)
    rng = np.random.default_rng(loop.seed)
    torch.manual_seed(loop.seed)
    opt = torch.optim.AdamW(net.parameters(), lr=optim_cfg.lr, weight_decay=optim_cfg.weight_decay)
    history: list[dict] = []
    best_state, best_val, best_epoch = None, float("inf"), -1
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(loop.epochs):
            lr = lr_at(epoch, optim_cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            net.train()
            losses = []
            for _ in range(loop.steps_per_epoch):
                x, g = batches(rng)
                x, g = x.to(device), g.to(device)
                out = net(x)
                if deep_supervision:
                    logits, ds = out
                    loss = combined_loss(logits, ds, g, loss_weights)
                else:
                    loss = combined_loss(out, None, g, loss_weights)
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(net.parameters(), optim_cfg.grad_clip_norm)
                post = _global_grad_norm(net.parameters())
                assert post <= optim_cfg.grad_clip_norm * (1.0 + 1e-4), (
                    f"post-clip gradient norm {post} exceeds {optim_cfg.grad_clip_norm}"
                )
                opt.step()
                losses.append(float(loss.detach()))
            val_loss, val_dice = validate(net)
            entry = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "val_loss": val_loss,
                "val_dice": val_dice,
            }
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            # no validation cases: fall back to selecting on training loss
            score = entry["train_loss"] if math.isnan(val_loss) else val_loss
            if score < best_val:
                best_val, best_epoch = score, epoch
                best_state = copy.deepcopy(net.state_dict())
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return TrainResult(net, history, best_epoch, best_val)


def _center_crop(stack: np.ndarray, gt: np.ndarray, patch) -> tuple[np.ndarray, np.ndarray]:
    stack, gt = _pad_to_patch(stack, gt, patch)
    if gt.any():
        center = np.argwhere(gt > 0).mean(axis=0).round().astype(int)
    else:
        center = np.array([n // 2 for n in gt.shape])
    start = [int(np.clip(c - p // 2, 0, n - p)) for c, p, n in zip(center, patch, gt.shape)]
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
    return stack[(slice(None),) + sl], gt[sl]


def _make_validator(
    arrays: Mapping[str, tuple[np.ndarray, np.ndarray]],
    val_ids: Sequence[str],
    patch,
    loss_weights: LossWeights,
    device: str,
):
    """Deterministic validation on one lesion-centred crop per held-out case."""

    crops = [_center_crop(*arrays[cid], patch) for cid in val_ids]

    def validate(net: torch.nn.Module) -> tuple[float, float | None]:
        if not crops:
            return float("nan"), None
        net.eval()
        losses, dices = [], []
        with torch.no_grad():
            for stack, gt in crops:
                x = torch.from_numpy(stack).unsqueeze(0).to(device)
                g = torch.from_numpy(gt.astype(np.int64)).unsqueeze(0).to(device)
                out = net(x)
                logits = out[0] if isinstance(out, tuple) else out
                losses.append(float(combined_loss(logits, None, g, loss_weights)))
                pred = (lesion_probability(logits) > 0.5).long()
                inter = int((pred * g).sum())
                denom = int(pred.sum() + g.sum())
                if denom > 0:
                    dices.append(2.0 * inter / denom)
        mean_dice = float(np.mean(dices)) if dices else None
        return float(np.mean(losses)), mean_dice

    return validate


# -- coarse member training -------------------------------------------------------


def train_coarse_member(
    data: Mapping[str, CaseRecord],
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    net_config: CoarseUNetConfig = CoarseUNetConfig(),
    optim_cfg: OptimConfig = OptimConfig(),
    loop: TrainLoopConfig = TrainLoopConfig(),
    loss_weights: LossWeights = LossWeights(),
    augment_cfg: AugmentConfig = AugmentConfig(),
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train one coarse member on 6 mm crops with foreground oversampling."""
    if not train_ids:
        raise ValueError("empty training set")
    overlap = set(train_ids) & set(val_ids)
    if overlap:
        raise ValueError(f"train/val folds overlap: {sorted(overlap)[:3]}")
    arrays = {
        cid: coarse_case_arrays(data[cid], loop.coarse_spacing_mm)
        for cid in (*train_ids, *val_ids)
    }
    patch = net_config.patch_shape
    spacing = (loop.coarse_spacing_mm,) * 3
    train_list = list(train_ids)

    def batches(rng: np.random.Generator):
        xs, gs = [], []
        for _ in range(loop.batch_size):
            cid = train_list[int(rng.integers(len(train_list)))]
            stack, gt = sample_crop(*arrays[cid], patch, rng, loop.fg_oversample_prob)
            if loop.augment:
                stack, gt = augment_crop(stack, gt, rng, augment_cfg, spacing=spacing)
            xs.append(stack)
            gs.append(gt.astype(np.int64))
        return (
            torch.from_numpy(np.stack(xs)),
            torch.from_numpy(np.stack(gs)),
        )

    net = CoarseUNet(net_config)
    validate = _make_validator(arrays, val_ids, patch, loss_weights, loop.device)
    return _train_epochs(
        net, batches, validate, optim_cfg, loop, loss_weights, deep_supervision=True, log_path=log_path
    )


# -- refiner training --------------------------------------------------------------


def refiner_case_arrays(
    case: CaseRecord,
    coarse_prob_native: VolumeGrid,
) -> tuple[np.ndarray, np.ndarray]:
    """(6, ...) native stack (5 windows + coarse probability) and native gt."""
    from .preprocess import append_coarse_mask

    stack = append_coarse_mask(build_channel_stack(case.suv, case.ct), coarse_prob_native)
    gt = (
        case.gt_mask.data.astype(np.uint8)
        if case.gt_mask is not None
        else np.zeros(case.suv.shape, dtype=np.uint8)
    )
    return stack.as_array(), gt


def train_refiner(
    data: Mapping[str, CaseRecord],
    coarse_prob_fn: Callable[[CaseRecord], VolumeGrid],
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    net_config: RefinerConfig = RefinerConfig(),
    optim_cfg: OptimConfig = OptimConfig(),
    loop: TrainLoopConfig = TrainLoopConfig(),
    loss_weights: LossWeights = LossWeights(),
    augment_cfg: AugmentConfig = AugmentConfig(),
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train the refiner on native-resolution crops of the 6-channel stack.

    ``coarse_prob_fn`` maps a case to its frozen-ensemble probability at that
    case's native grid (the 6 mm map is resolution independent, so spacing
    variants reuse it). Each case is optionally materialized at extra random
    spacings (the refiner's spacing augmentation).
    """
    if not train_ids:
        raise ValueError("empty training set")
    if coarse_prob_fn is None:
        raise ValueError("missing coarse ensemble")
    rng = np.random.default_rng(loop.seed + 1)

    def variants(case: CaseRecord) -> list[tuple[np.ndarray, np.ndarray]]:
        out = [refiner_case_arrays(case, coarse_prob_fn(case))]
        for _ in range(loop.spacing_variants):
            s = float(rng.uniform(*augment_cfg.spacing_jitter_range_mm))
            target = (s, s, s)
            v = CaseRecord.from_volumes(
                case.case_id,
                resample(case.suv, target, ResampleMode.LINEAR),
                resample(case.ct, target, ResampleMode.LINEAR),
                resample(case.gt_mask, target, ResampleMode.NEAREST)
                if case.gt_mask is not None
                else None,
            )
            out.append(refiner_case_arrays(v, coarse_prob_fn(v)))
        return out

    train_variants = {cid: variants(data[cid]) for cid in train_ids}
    val_arrays = {cid: refiner_case_arrays(data[cid], coarse_prob_fn(data[cid])) for cid in val_ids}
    patch = net_config.patch_shape
    train_list = list(train_ids)

    def batches(step_rng: np.random.Generator):
        xs, gs = [], []
        for _ in range(loop.batch_size):
            cid = train_list[int(step_rng.integers(len(train_list)))]
            vs = train_variants[cid]
            if len(vs) > 1 and step_rng.random() < loop.spacing_variant_prob:
                stack, gt = vs[1 + int(step_rng.integers(len(vs) - 1))]
            else:
                stack, gt = vs[0]
            stack, gt = sample_crop(stack, gt, patch, step_rng, loop.fg_oversample_prob)
            if loop.augment:
                stack, gt = augment_crop(stack, gt, step_rng, augment_cfg)
            xs.append(stack)
            gs.append(gt.astype(np.int64))
        return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(gs))

    net = Refiner(net_config)
    validate = _make_validator(val_arrays, val_ids, patch, loss_weights, loop.device)
    return _train_epochs(
        net, batches, validate, optim_cfg, loop, loss_weights, deep_supervision=False, log_path=log_path
    )
