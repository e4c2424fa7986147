"""Case loading/saving: NIfTI triplets plus a JSON manifest per dataset.

Manifest format: ``{"cases": {case_id: {"suv": rel, "ct": rel, "mask": rel?}}}``
with paths relative to the manifest's directory.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator, Mapping

from .nifti import read_nifti, write_nifti
from .volume import CaseRecord, VolumeGrid, VolumeKind, GEOMETRY_TOL_MM


class CaseLoadError(ValueError):
    """A case on disk violates the alignment or mask contracts."""


def _load_grid(path: Path, kind: VolumeKind) -> VolumeGrid:
    data, spacing, origin = read_nifti(path)
    if kind is VolumeKind.BINARY_MASK:
        import numpy as np

        arr = np.asarray(data)
        if not np.isin(arr, (0, 1)).all():
            bad = sorted(set(np.unique(arr)) - {0, 1})
            raise CaseLoadError(f"{path}: mask contains non-binary values {bad[:5]}")
        data = arr.astype("uint8")
    return VolumeGrid(data, spacing, origin, kind)


def load_case(
    case_id: str,
    suv_path: str | Path,
    ct_path: str | Path,
    mask_path: str | Path | None = None,
) -> CaseRecord:
    """Load an aligned SUV/CT(/mask) triplet into a CaseRecord.

    Raises FileNotFoundError for missing files and CaseLoadError when the
    volumes disagree in shape or exceed the 1e-3 mm spacing/origin tolerance,
    or the mask is not binary.
    """
    suv = _load_grid(Path(suv_path), VolumeKind.SUV)
    ct = _load_grid(Path(ct_path), VolumeKind.HU)
    mask = _load_grid(Path(mask_path), VolumeKind.BINARY_MASK) if mask_path else None

    grids = {"ct": ct, **({"mask": mask} if mask is not None else {})}
    for name, g in grids.items():
        if g.shape != suv.shape:
            raise CaseLoadError(
                f"{case_id}: {name} shape {g.shape} does not match suv shape {suv.shape}"
            )
        if not suv.same_geometry(g, GEOMETRY_TOL_MM):
            raise CaseLoadError(
                f"{case_id}: {name} spacing/origin differs from suv beyond {GEOMETRY_TOL_MM} mm"
            )
    return CaseRecord.from_volumes(case_id, suv, ct, mask)


def save_case(case: CaseRecord, directory: str | Path) -> dict[str, str]:
    """Write a case's volumes under ``directory``; returns manifest-style rel paths."""
    directory = Path(directory)
    entry = {"suv": f"{case.case_id}_suv.nii.gz", "ct": f"{case.case_id}_ct.nii.gz"}
    write_nifti(directory / entry["suv"], case.suv.data, case.suv.spacing, case.suv.origin)
    write_nifti(directory / entry["ct"], case.ct.data, case.ct.spacing, case.ct.origin)
    if case.gt_mask is not None:
        entry["mask"] = f"{case.case_id}_mask.nii.gz"
        write_nifti(
            directory / entry["mask"], case.gt_mask.data, case.gt_mask.spacing, case.gt_mask.origin
        )
    return entry


def write_manifest(entries: Mapping[str, Mapping[str, str]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps({"cases": {k: dict(v) for k, v in entries.items()}}, indent=2, sort_keys=True))
    tmp.replace(path)


def read_manifest(path: str | Path) -> dict[str, dict[str, str]]:
    payload = json.loads(Path(path).read_text())
    cases = payload.get("cases")
    if not isinstance(cases, dict):
        raise CaseLoadError(f"{path}: manifest missing 'cases' mapping")
    return cases


def iter_manifest_cases(path: str | Path) -> Iterator[CaseRecord]:
    """Yield CaseRecords for every manifest entry, resolving relative paths."""
    path = Path(path)
    root = path.parent
    for case_id, entry in sorted(read_manifest(path).items()):
        mask = entry.get("mask")
        yield load_case(
            case_id,
            root / entry["suv"],
            root / entry["ct"],
            root / mask if mask else None,
        )
