"""Minimal NIfTI-1 reader/writer for ``.nii`` / ``.nii.gz`` volumes.

Covers exactly what the toolkit needs: 3D scalar volumes, voxel spacing from
the header ``pixdim`` fields, and the origin from the sform/qform translation.
Rotated or sheared orientations are not interpreted (grids are treated as
axis-aligned in the canonical (x, y, z) order); full orientation handling and
DICOM are out of scope.

Writes are deterministic: the gzip stream carries no filename and mtime 0.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

_HDR_SIZE = 348
_MAGIC = b"n+1\0"

# NIfTI-1 datatype codes <-> numpy dtypes (little-endian on disk)
_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
    256: np.dtype("<i1"),
    512: np.dtype("<u2"),
    768: np.dtype("<u4"),
}
_CODES = {v.newbyteorder("="): k for k, v in _DTYPES.items()}


class NiftiError(ValueError):
    """Raised when a file cannot be parsed as NIfTI-1."""


def _open_read(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _write_bytes(path: Path, compress: bool, chunks: list[bytes]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as raw:
        if compress:
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
                for c in chunks:
                    gz.write(c)
        else:
            for c in chunks:
                raw.write(c)
    tmp.replace(path)


def read_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float], tuple[float, float, float]]:
    """Load a 3D NIfTI-1 volume.

    Returns ``(data, spacing_mm, origin_mm)`` with data in (x, y, z) index
    order (the NIfTI on-disk fastest-varying axis first).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with _open_read(path) as fh:
        hdr = fh.read(_HDR_SIZE)
        if len(hdr) < _HDR_SIZE:
            raise NiftiError(f"{path}: truncated header")
        bo = "<"
        (sizeof_hdr,) = struct.unpack_from("<i", hdr, 0)
        if sizeof_hdr != _HDR_SIZE:
            (sizeof_hdr,) = struct.unpack_from(">i", hdr, 0)
            if sizeof_hdr != _HDR_SIZE:
                raise NiftiError(f"{path}: not a NIfTI-1 file")
            bo = ">"
        if hdr[344:348] not in (b"n+1\0", b"ni1\0"):
            raise NiftiError(f"{path}: missing NIfTI-1 magic")
        dim = struct.unpack_from(f"{bo}8h", hdr, 40)
        ndim = dim[0]
        if not 1 <= ndim <= 7:
            raise NiftiError(f"{path}: bad dim[0]={ndim}")
        shape = tuple(int(d) for d in dim[1 : 1 + ndim])
        if any(d > 1 for d in shape[3:]) or len([d for d in shape[:3] if d >= 1]) < 3:
            raise NiftiError(f"{path}: only 3D volumes are supported, got dim {shape}")
        shape3 = shape[:3]
        (datatype,) = struct.unpack_from(f"{bo}h", hdr, 70)
        if datatype not in _DTYPES:
            raise NiftiError(f"{path}: unsupported datatype code {datatype}")
        dtype = _DTYPES[datatype].newbyteorder(bo)
        pixdim = struct.unpack_from(f"{bo}8f", hdr, 76)
        spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])
        (vox_offset,) = struct.unpack_from(f"{bo}f", hdr, 108)
        scl_slope, scl_inter = struct.unpack_from(f"{bo}2f", hdr, 112)
        qform_code, sform_code = struct.unpack_from(f"{bo}2h", hdr, 252)
        qoffset = struct.unpack_from(f"{bo}3f", hdr, 268)
        srow_x = struct.unpack_from(f"{bo}4f", hdr, 280)
        srow_y = struct.unpack_from(f"{bo}4f", hdr, 296)
        srow_z = struct.unpack_from(f"{bo}4f", hdr, 312)
        if sform_code > 0:
            origin = (float(srow_x[3]), float(srow_y[3]), float(srow_z[3]))
        elif qform_code > 0:
            origin = tuple(float(q) for q in qoffset)
        else:
            origin = (0.0, 0.0, 0.0)

        skip = int(round(vox_offset)) - _HDR_SIZE
        if skip > 0:
            fh.read(skip)
        n_vox = int(np.prod(shape3))
        buf = fh.read(n_vox * dtype.itemsize)
        if len(buf) < n_vox * dtype.itemsize:
            raise NiftiError(f"{path}: truncated data section")
        data = np.frombuffer(buf, dtype=dtype).reshape(shape3, order="F")
        data = np.ascontiguousarray(data.astype(dtype.newbyteorder("=")))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter
    return data, spacing, origin


def write_nifti(
    path: str | Path,
    data: np.ndarray,
    spacing: tuple[float, float, float],
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> None:
    """Write a 3D array as NIfTI-1, with a diagonal sform carrying spacing/origin."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected 3D data, got shape {data.shape}")
    if data.dtype == bool:
        data = data.astype(np.uint8)
    native = data.dtype.newbyteorder("=")
    if native not in _CODES:
        # fall back to the widest safe float representation
        data = data.astype(np.float64 if data.dtype.kind == "f" and data.dtype.itemsize > 4 else np.float32)
        native = data.dtype.newbyteorder("=")
    code = _CODES[native]
    disk_dtype = _DTYPES[code]

    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, disk_dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *[float(s) for s in spacing], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[123] = 2  # xyzt_units: millimetres
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform unused, sform "aligned"
    struct.pack_into("<4f", hdr, 280, float(spacing[0]), 0.0, 0.0, float(origin[0]))
    struct.pack_into("<4f", hdr, 296, 0.0, float(spacing[1]), 0.0, float(origin[1]))
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, float(spacing[2]), float(origin[2]))
    hdr[344:348] = _MAGIC

    payload = np.asfortranarray(data.astype(disk_dtype)).tobytes(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_bytes(path, path.suffix == ".gz", [bytes(hdr), b"\0\0\0\0", payload])
