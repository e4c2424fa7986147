"""Batch entry points wiring the pipeline stages together.

Subcommands: phantom, split, train-coarse, fit-ensemble, train-refiner,
infer, evaluate, report. Exit codes: 0 success, 1 usage error, 2 validation
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config

USAGE_ERROR = 1
VALIDATION_ERROR = 2
RUNTIME_ERROR = 3


class ValidationFailure(ValueError):
    """Bad inputs detected before any work started."""


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    tmp.replace(path)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="experiment config YAML")
    p.add_argument("--seed", type=int, default=None, help="overrides seeds.global_seed")
    p.add_argument("--workers", type=int, default=1, help="parallel workers over cases")
    p.add_argument("--device", type=str, default=None, help="torch device (default cpu)")
    p.add_argument("--dry-run", action="store_true", help="validate inputs, write nothing")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic cases + manifest")
    p.add_argument("--n", type=int, default=None, help="number of cases (default: config)")
    p.add_argument("--out", type=Path, default=None, help="output dataset directory")
    _common_flags(p)

    p = sub.add_parser("split", help="emit a stratified SplitPlan JSON")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _common_flags(p)

    p = sub.add_parser("train-coarse", help="train one coarse ensemble member")
    p.add_argument("--member", type=int, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="model directory")
    _common_flags(p)

    p = sub.add_parser("fit-ensemble", help="fit stacking weights on held-out folds")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--models", type=Path, required=True, help="directory with coarse_*.pt")
    _common_flags(p)

    p = sub.add_parser("train-refiner", help="train the native-resolution refiner")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--models", type=Path, required=True)
    _common_flags(p)

    p = sub.add_parser("infer", help="run the full cascade over a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--models", type=Path, required=True, help="bundle directory")
    p.add_argument("--out", type=Path, required=True)
    _common_flags(p)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True, help="directory of *_pred.nii.gz")
    p.add_argument("--manifest", type=Path, required=True, help="ground-truth manifest")
    p.add_argument("--out", type=Path, required=True, help="report JSON path")
    p.add_argument("--scatter", type=Path, default=None, help="MTV scatter CSV path")
    p.add_argument("--empty-rule", choices=("paper", "challenge"), default="paper")
    p.add_argument("--lesion-sensitivity", action="store_true")
    _common_flags(p)

    p = sub.add_parser("report", help="pretty-print an evaluation report")
    p.add_argument("--report", type=Path, required=True)
    _common_flags(p)

    return parser


def _seed_of(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds.global_seed


def _device_of(args, cfg: ExperimentConfig) -> str:
    return args.device if args.device else cfg.loop.device


def _load_cases(manifest: Path) -> dict:
    from .case_io import iter_manifest_cases

    if not manifest.exists():
        raise ValidationFailure(f"manifest not found: {manifest}")
    return {c.case_id: c for c in iter_manifest_cases(manifest)}


def _load_plan(path: Path):
    from .training import SplitPlan

    if not path.exists():
        raise ValidationFailure(f"split plan not found: {path}")
    return SplitPlan.from_json(path.read_text())


def _cmd_phantom(args, cfg: ExperimentConfig) -> int:
    from .case_io import save_case, write_manifest
    from .phantom import generate_cohort

    count = args.n if args.n is not None else cfg.phantom.count
    if count < 1:
        raise ValidationFailure("--n must be >= 1")
    out = args.out if args.out is not None else Path(cfg.paths.data_root)
    if args.dry_run:
        print(f"dry-run: would generate {count} phantoms into {out}")
        return 0
    ph = cfg.phantom
    cases = generate_cohort(
        count,
        _seed_of(args, cfg),
        shape=ph.shape,
        spacing=ph.spacing,
        n_lesions_range=ph.n_lesions_range,
        negative_fraction=ph.negative_fraction,
        lesion_radius_range=ph.lesion_radius_range,
        lesion_suv_range=ph.lesion_suv_range,
        include_hot_organs=ph.include_hot_organs,
    )
    entries = {}
    for case in cases:
        entries[case.case_id] = save_case(case, out)
    write_manifest(entries, out / "manifest.json")
    print(f"wrote {len(cases)} cases + manifest to {out}")
    return 0


def _cmd_split(args, cfg: ExperimentConfig) -> int:
    from .training import make_stratified_splits

    cases = _load_cases(args.manifest)
    if args.dry_run:
        print(f"dry-run: would split {len(cases)} cases into k={cfg.split.k} folds")
        return 0
    plan = make_stratified_splits(
        list(cases.values()),
        k=cfg.split.k,
        test_fraction=cfg.split.test_fraction,
        seed=_seed_of(args, cfg),
    )
    _write_text(args.out, plan.to_json())
    print(
        f"split {len(cases)} cases: {len(plan.test_ids)} test, "
        f"{len(plan.folds)} folds over {len(plan.dev_ids)} dev cases -> {args.out}"
    )
    return 0


def _loop_with(args, cfg: ExperimentConfig, **overrides):
    import dataclasses

    loop = cfg.loop
    updates = {"device": _device_of(args, cfg), "seed": _seed_of(args, cfg), **overrides}
    return dataclasses.replace(loop, **updates)


def _cmd_train_coarse(args, cfg: ExperimentConfig) -> int:
    from .nets import save_checkpoint
    from .training import member_fold_assignment, train_coarse_member

    if not 0 <= args.member < cfg.split.n_members:
        raise ValidationFailure(f"--member must be in [0, {cfg.split.n_members - 1}]")
    cases = _load_cases(args.manifest)
    plan = _load_plan(args.split)
    train_ids, val_ids = member_fold_assignment(
        plan, args.member, cfg.split.n_members, cfg.split.train_folds_per_member
    )
    if args.dry_run:
        print(f"dry-run: member {args.member}: {len(train_ids)} train / {len(val_ids)} val cases")
        return 0
    loop = _loop_with(args, cfg, seed=_seed_of(args, cfg) + 17 * args.member)
    result = train_coarse_member(
        cases,
        train_ids,
        val_ids,
        net_config=cfg.coarse_net,
        optim_cfg=cfg.optim,
        loop=loop,
        loss_weights=cfg.loss,
        augment_cfg=cfg.augment,
        log_path=None,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / f"coarse_{args.member}.pt", result.net, extra={"history": result.history})
    _write_json(args.out / f"coarse_{args.member}_history.json", {"history": result.history})
    print(
        f"member {args.member}: best val loss {result.best_val_loss:.4f} "
        f"at epoch {result.best_epoch} -> {args.out / f'coarse_{args.member}.pt'}"
    )
    return 0


def _member_nets(models_dir: Path, n_members: int, device: str):
    from .nets import load_checkpoint

    nets = []
    for i in range(n_members):
        path = models_dir / f"coarse_{i}.pt"
        if not path.exists():
            raise ValidationFailure(f"missing member checkpoint: {path}")
        nets.append(load_checkpoint(path, device)[0])
    return nets


def _cmd_fit_ensemble(args, cfg: ExperimentConfig) -> int:
    import numpy as np

    from .inference import sliding_window_predict
    from .nets import StackingWeights, fit_stacking_weights, stacking_calibration_loss
    from .preprocess import build_channel_stack
    from .training import coarse_case_arrays, shared_calibration_ids
    from .volume import ResampleMode, resample

    cases = _load_cases(args.manifest)
    plan = _load_plan(args.split)
    calib_ids = shared_calibration_ids(plan, cfg.split.n_members, cfg.split.train_folds_per_member)
    if not calib_ids:
        raise ValidationFailure(
            "no dev cases are unseen by every member; reduce train_folds_per_member"
        )
    device = _device_of(args, cfg)
    if args.dry_run:
        print(f"dry-run: would fit stacking on {len(calib_ids)} calibration cases")
        return 0
    members = _member_nets(args.models, cfg.split.n_members, device)
    spacing = cfg.pipeline.coarse_spacing_mm
    preds: list[list] = [[] for _ in members]
    targets = []
    for cid in calib_ids:
        case = cases[cid]
        target = (spacing,) * 3
        suv = resample(case.suv, target, ResampleMode.LINEAR)
        ct = resample(case.ct, target, ResampleMode.LINEAR)
        stack = build_channel_stack(suv, ct)
        for mi, net in enumerate(members):
            prob = sliding_window_predict(
                net, stack, net.config.patch_shape, cfg.pipeline.overlap, device
            )
            preds[mi].append(prob.data)
        targets.append(coarse_case_arrays(case, spacing)[1])
    weights = fit_stacking_weights(preds, targets, cfg.loss, seed=_seed_of(args, cfg))
    for mi in range(len(members)):
        selector = StackingWeights(np.eye(len(members))[mi], 0.0)
        loss_m = stacking_calibration_loss(preds, targets, selector, cfg.loss)
        print(f"member {mi} calibration loss: {loss_m:.5f}")
    loss_e = stacking_calibration_loss(preds, targets, weights, cfg.loss)
    print(f"ensemble calibration loss: {loss_e:.5f}; weights {weights.w.tolist()}, bias {weights.bias:.4f}")
    _write_text(args.models / "stacking.json", weights.to_json())
    return 0


def _cmd_train_refiner(args, cfg: ExperimentConfig) -> int:
    from .inference import predict_coarse_prob
    from .nets import StackingWeights, save_checkpoint
    from .training import shared_calibration_ids, train_refiner

    cases = _load_cases(args.manifest)
    plan = _load_plan(args.split)
    stacking_path = args.models / "stacking.json"
    if not stacking_path.exists():
        raise ValidationFailure(f"missing ensemble stacking weights: {stacking_path}")
    stacking = StackingWeights.from_json(stacking_path.read_text())
    device = _device_of(args, cfg)
    members = _member_nets(args.models, cfg.split.n_members, device)
    calib = set(shared_calibration_ids(plan, cfg.split.n_members, cfg.split.train_folds_per_member))
    train_ids = tuple(cid for cid in plan.dev_ids if cid not in calib)
    val_ids = tuple(sorted(calib))
    if args.dry_run:
        print(f"dry-run: refiner on {len(train_ids)} train / {len(val_ids)} val cases")
        return 0

    def coarse_prob_fn(case):
        return predict_coarse_prob(
            case, members, stacking, cfg.pipeline.overlap, cfg.pipeline.coarse_spacing_mm, device
        )[0]

    result = train_refiner(
        cases,
        coarse_prob_fn,
        train_ids,
        val_ids,
        net_config=cfg.refiner_net,
        optim_cfg=cfg.optim,
        loop=_loop_with(args, cfg),
        loss_weights=cfg.loss,
        augment_cfg=cfg.augment,
    )
    save_checkpoint(args.models / "refiner.pt", result.net, extra={"history": result.history})
    _write_json(
        args.models / "pipeline.json",
        {
            "threshold": cfg.pipeline.threshold,
            "overlap": cfg.pipeline.overlap,
            "coarse_spacing_mm": cfg.pipeline.coarse_spacing_mm,
            "n_members": cfg.split.n_members,
        },
    )
    _write_json(args.models / "refiner_history.json", {"history": result.history})
    print(
        f"refiner: best val loss {result.best_val_loss:.4f} at epoch {result.best_epoch} "
        f"-> {args.models / 'refiner.pt'}"
    )
    return 0


def _cmd_infer(args, cfg: ExperimentConfig) -> int:
    from .inference import PipelineBundle, run_pipeline
    from .nifti import write_nifti

    cases = _load_cases(args.manifest)
    if not (args.models / "pipeline.json").exists():
        raise ValidationFailure(f"{args.models} is not a pipeline bundle directory")
    if args.dry_run:
        print(f"dry-run: would run the cascade on {len(cases)} cases into {args.out}")
        return 0
    bundle = PipelineBundle.load(args.models, _device_of(args, cfg))
    args.out.mkdir(parents=True, exist_ok=True)

    def process(case):
        result = run_pipeline(case, bundle)
        mask = result.mask
        write_nifti(args.out / f"{case.case_id}_pred.nii.gz", mask.data, mask.spacing, mask.origin)
        _write_json(args.out / f"{case.case_id}_pred.json", result.summary())
        return result

    ordered = [cases[cid] for cid in sorted(cases)]
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(process, ordered))
    else:
        results = [process(c) for c in ordered]
    mean_rt = sum(r.runtime_seconds for r in results) / len(results)
    print(f"segmented {len(results)} cases (mean {mean_rt:.2f}s/case) -> {args.out}")
    return 0


def _cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    from .evaluation import aggregate, compute_case_metrics, save_mtv_scatter, save_report
    from .nifti import read_nifti
    from .volume import VolumeGrid, VolumeKind

    cases = _load_cases(args.manifest)
    pred_dir = args.pred
    if not pred_dir.is_dir():
        raise ValidationFailure(f"prediction directory not found: {pred_dir}")
    if args.dry_run:
        print(f"dry-run: would evaluate {len(cases)} cases from {pred_dir}")
        return 0

    def score(case):
        pred_path = pred_dir / f"{case.case_id}_pred.nii.gz"
        if not pred_path.exists():
            raise FileNotFoundError(f"missing prediction {pred_path}")
        data, spacing, origin = read_nifti(pred_path)
        pred = VolumeGrid(data.astype("uint8"), spacing, origin, VolumeKind.BINARY_MASK)
        gt = case.gt_mask
        if gt is None:
            gt = VolumeGrid(
                data * 0, case.suv.spacing, case.suv.origin, VolumeKind.BINARY_MASK
            )
        runtime = None
        meta_path = pred_dir / f"{case.case_id}_pred.json"
        if meta_path.exists():
            runtime = json.loads(meta_path.read_text()).get("runtime_seconds")
        return compute_case_metrics(
            case.case_id,
            pred,
            gt,
            empty_rule=args.empty_rule,
            lesion_level_sensitivity=args.lesion_sensitivity,
            runtime_seconds=runtime,
        )

    ordered = [cases[cid] for cid in sorted(cases)]
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            metrics = list(pool.map(score, ordered))
    else:
        metrics = [score(c) for c in ordered]
    agg = aggregate(metrics)
    save_report(metrics, agg, args.out)
    if args.scatter:
        save_mtv_scatter(metrics, args.scatter)
    dice = "n/a" if agg.mean_dice is None else f"{agg.mean_dice:.4f}"
    fg = "n/a" if agg.mean_foreground_dice is None else f"{agg.mean_foreground_dice:.4f}"
    print(f"evaluated {agg.n_cases} cases: dice {dice}, foreground dice {fg} -> {args.out}")
    return 0


REPORT_COLUMNS = (
    "Config",
    "Dice",
    "Dice Foreground",
    "FN",
    "FP",
    "Sensitivity",
    "MTV found",
    "MTV",
    "time (s)",
)


def format_report_table(report: dict, label: str = "Full") -> str:
    agg = report["aggregate"]

    def num(x, nd=4):
        return "n/a" if x is None else f"{x:.{nd}f}"

    row = (
        label,
        num(agg["mean_dice"]),
        num(agg["mean_foreground_dice"]),
        num(agg["mean_fn_ml"], 2),
        num(agg["mean_fp_ml"], 2),
        num(agg["mean_sensitivity"]),
        num(agg["mean_mtv_pred_voxels"], 1),
        num(agg["mean_mtv_gt_voxels"], 1),
        num(agg["mean_runtime_seconds"], 2),
    )
    widths = [max(len(h), len(v)) for h, v in zip(REPORT_COLUMNS, row)]
    header = " | ".join(h.ljust(w) for h, w in zip(REPORT_COLUMNS, widths))
    rule = "-+-".join("-" * w for w in widths)
    body = " | ".join(v.ljust(w) for v, w in zip(row, widths))
    lines = [header, rule, body]
    reg = agg.get("mtv_regression")
    if reg:
        lines.append(
            f"MTV agreement: R^2={reg['r_squared']:.4f}, slope={reg['slope']:.4f}, "
            f"intercept={reg['intercept']:.2f} mL over {reg['n_cases']} cases"
        )
    return "\n".join(lines)


def _cmd_report(args, cfg: ExperimentConfig) -> int:
    if not args.report.exists():
        raise ValidationFailure(f"report not found: {args.report}")
    report = json.loads(args.report.read_text())
    print(format_report_table(report))
    return 0


_HANDLERS = {
    "phantom": _cmd_phantom,
    "split": _cmd_split,
    "train-coarse": _cmd_train_coarse,
    "fit-ensemble": _cmd_fit_ensemble,
    "train-refiner": _cmd_train_refiner,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def command_dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse prints its own message; --help exits 0
        return 0 if exc.code == 0 else USAGE_ERROR
    try:
        cfg = load_config(args.config)
    except (ConfigError, FileNotFoundError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return VALIDATION_ERROR
    try:
        return _HANDLERS[args.command](args, cfg)
    except (ValidationFailure, ConfigError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return VALIDATION_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def main() -> None:
    sys.exit(command_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
