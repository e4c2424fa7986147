"""Segmentation metrics: dice variants, component-overlap FN/FP volumes,
sensitivity, MTV, and the predicted-vs-manual MTV regression.

Empty-mask conventions follow the published table rules: a prediction on a
lesion-free case scores dice 0; a correctly empty prediction is discarded
from the dice mean ("paper" rule) or scored 1 ("challenge" rule). VOID
entries are represented as None and excluded from aggregates.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .volume import CONNECTIVITY_26, VolumeGrid, VolumeKind, require_same_geometry

EMPTY_RULES = ("paper", "challenge")


def connected_components(mask: VolumeGrid) -> tuple[VolumeGrid, int]:
    """26-connected labelling of a binary mask; returns (label map, count)."""
    if mask.kind is not VolumeKind.BINARY_MASK:
        raise ValueError("connected_components expects a BINARY_MASK grid")
    labels, n = ndimage.label(mask.data, structure=CONNECTIVITY_26)
    grid = VolumeGrid(labels.astype(np.int32), mask.spacing, mask.origin, VolumeKind.LABEL_MAP)
    return grid, int(n)


def _binary_pair(pred: VolumeGrid, gt: VolumeGrid) -> tuple[np.ndarray, np.ndarray]:
    for g in (pred, gt):
        if g.kind is not VolumeKind.BINARY_MASK:
            raise ValueError("metrics expect BINARY_MASK grids")
    require_same_geometry(pred, gt)
    return pred.data.astype(bool), gt.data.astype(bool)


def case_dice(pred: VolumeGrid, gt: VolumeGrid, empty_rule: str = "paper") -> float | None:
    """Dice with the empty-mask table rules; None means discarded (VOID)."""
    if empty_rule not in EMPTY_RULES:
        raise ValueError(f"empty_rule must be one of {EMPTY_RULES}")
    p, g = _binary_pair(pred, gt)
    np_, ng = int(p.sum()), int(g.sum())
    if ng == 0:
        if np_ == 0:
            return None if empty_rule == "paper" else 1.0
        return 0.0
    inter = int((p & g).sum())
    return 2.0 * inter / (np_ + ng)


def overlap_volumes(pred: VolumeGrid, gt: VolumeGrid) -> tuple[int, int]:
    """(fn_voxels, fp_voxels): totals of components with zero cross overlap.

    FP counts predicted components that touch no ground-truth voxel; FN counts
    ground-truth components that touch no predicted voxel.
    """
    p, g = _binary_pair(pred, gt)
    fn = _zero_overlap_voxels(g, p)
    fp = _zero_overlap_voxels(p, g)
    return fn, fp


def _zero_overlap_voxels(source: np.ndarray, other: np.ndarray) -> int:
    labels, n = ndimage.label(source, structure=CONNECTIVITY_26)
    if n == 0:
        return 0
    overlapped = np.unique(labels[other & (labels > 0)])
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    miss = np.ones(n + 1, dtype=bool)
    miss[0] = False
    miss[overlapped] = False
    return int(sizes[miss].sum())


def case_sensitivity(
    pred: VolumeGrid, gt: VolumeGrid, lesion_level: bool = False
) -> float | None:
    """Voxel recall |P∩G|/|G| (default) or the per-lesion detection rate.

    Returns None (VOID) when the ground truth is empty. The lesion-level
    variant counts ground-truth components touched by at least one predicted
    voxel; it is provided for exploration, without any claim of matching the
    published sensitivity.
    """
    p, g = _binary_pair(pred, gt)
    ng = int(g.sum())
    if ng == 0:
        return None
    if not lesion_level:
        return int((p & g).sum()) / ng
    labels, n = ndimage.label(g, structure=CONNECTIVITY_26)
    detected = np.unique(labels[p & (labels > 0)])
    return len(detected) / n


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice: float | None
    fn_voxels: int
    fn_ml: float
    fp_voxels: int
    fp_ml: float
    sensitivity: float | None
    mtv_pred_voxels: int
    mtv_pred_ml: float
    mtv_gt_voxels: int
    mtv_gt_ml: float
    runtime_seconds: float | None = None


def compute_case_metrics(
    case_id: str,
    pred: VolumeGrid,
    gt: VolumeGrid,
    empty_rule: str = "paper",
    lesion_level_sensitivity: bool = False,
    runtime_seconds: float | None = None,
) -> CaseMetrics:
    p, g = _binary_pair(pred, gt)
    vox_ml = pred.voxel_volume_mm3 / 1000.0
    fn, fp = overlap_volumes(pred, gt)
    return CaseMetrics(
        case_id=case_id,
        dice=case_dice(pred, gt, empty_rule),
        fn_voxels=fn,
        fn_ml=fn * vox_ml,
        fp_voxels=fp,
        fp_ml=fp * vox_ml,
        sensitivity=case_sensitivity(pred, gt, lesion_level_sensitivity),
        mtv_pred_voxels=int(p.sum()),
        mtv_pred_ml=int(p.sum()) * vox_ml,
        mtv_gt_voxels=int(g.sum()),
        mtv_gt_ml=int(g.sum()) * vox_ml,
        runtime_seconds=runtime_seconds,
    )


@dataclass(frozen=True)
class MtvAgreement:
    r_squared: float
    slope: float
    intercept: float
    n_cases: int


def mtv_agreement(case_metrics: Sequence[CaseMetrics]) -> MtvAgreement:
    """OLS of predicted MTV (mL) on manual MTV: pred = slope * gt + intercept."""
    pairs = [
        (m.mtv_gt_ml, m.mtv_pred_ml)
        for m in case_metrics
        if m.mtv_gt_ml is not None and m.mtv_pred_ml is not None
    ]
    if len(pairs) < 3:
        raise ValueError(f"MTV regression needs >= 3 cases, got {len(pairs)}")
    gt = np.array([p[0] for p in pairs], dtype=np.float64)
    pred = np.array([p[1] for p in pairs], dtype=np.float64)
    if np.ptp(gt) == 0:
        raise ValueError("MTV regression needs ground-truth volume variance")
    slope, intercept = np.polyfit(gt, pred, 1)
    fitted = slope * gt + intercept
    ss_res = float(((pred - fitted) ** 2).sum())
    ss_tot = float(((pred - pred.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return MtvAgreement(float(r2), float(slope), float(intercept), len(pairs))


@dataclass(frozen=True)
class AggregateReport:
    mean_dice: float | None
    mean_foreground_dice: float | None
    mean_fn_ml: float
    mean_fp_ml: float
    mean_sensitivity: float | None
    mean_mtv_pred_voxels: float
    mean_mtv_gt_voxels: float
    mean_runtime_seconds: float | None
    mtv_regression: MtvAgreement | None
    n_cases: int
    n_discarded: int


def _mean(values: list) -> float | None:
    return float(np.mean(values)) if values else None


def aggregate(case_metrics: Sequence[CaseMetrics]) -> AggregateReport:
    dices = [m.dice for m in case_metrics if m.dice is not None]
    fg_dices = [m.dice for m in case_metrics if m.mtv_gt_voxels > 0 and m.dice is not None]
    sens = [m.sensitivity for m in case_metrics if m.sensitivity is not None]
    runtimes = [m.runtime_seconds for m in case_metrics if m.runtime_seconds is not None]
    try:
        regression = mtv_agreement(case_metrics)
    except ValueError:
        regression = None
    return AggregateReport(
        mean_dice=_mean(dices),
        mean_foreground_dice=_mean(fg_dices),
        mean_fn_ml=float(np.mean([m.fn_ml for m in case_metrics])) if case_metrics else 0.0,
        mean_fp_ml=float(np.mean([m.fp_ml for m in case_metrics])) if case_metrics else 0.0,
        mean_sensitivity=_mean(sens),
        mean_mtv_pred_voxels=float(np.mean([m.mtv_pred_voxels for m in case_metrics])) if case_metrics else 0.0,
        mean_mtv_gt_voxels=float(np.mean([m.mtv_gt_voxels for m in case_metrics])) if case_metrics else 0.0,
        mean_runtime_seconds=_mean(runtimes),
        mtv_regression=regression,
        n_cases=len(case_metrics),
        n_discarded=sum(1 for m in case_metrics if m.dice is None),
    )


def report_to_dict(cases: Sequence[CaseMetrics], agg: AggregateReport) -> dict:
    payload = asdict(agg)
    payload["mtv_regression"] = asdict(agg.mtv_regression) if agg.mtv_regression else None
    return {"cases": [asdict(m) for m in cases], "aggregate": payload}


def save_report(cases: Sequence[CaseMetrics], agg: AggregateReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(report_to_dict(cases, agg), indent=2, sort_keys=True))
    tmp.replace(path)


def save_mtv_scatter(cases: Sequence[CaseMetrics], path: str | Path) -> None:
    """Two-column CSV (mtv_gt_ml, mtv_pred_ml) for the agreement scatter plot."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mtv_gt_ml", "mtv_pred_ml"])
        for m in cases:
            writer.writerow([f"{m.mtv_gt_ml:.6f}", f"{m.mtv_pred_ml:.6f}"])
    tmp.replace(path)
