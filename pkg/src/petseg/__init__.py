"""Coarse-to-fine PET/CT lesion segmentation toolkit."""

from .volume import CaseRecord, ResampleMode, VolumeGrid, VolumeKind, resample, resample_like

__version__ = "0.1.0"

__all__ = [
    "CaseRecord",
    "ResampleMode",
    "VolumeGrid",
    "VolumeKind",
    "resample",
    "resample_like",
    "__version__",
]
