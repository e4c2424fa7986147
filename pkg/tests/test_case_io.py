import gzip

import numpy as np
import pytest

from petseg.case_io import (
    CaseLoadError,
    iter_manifest_cases,
    load_case,
    read_manifest,
    save_case,
    write_manifest,
)
from petseg.nifti import NiftiError, read_nifti, write_nifti


class TestNifti:
    @pytest.mark.parametrize(
        "dtype", [np.float32, np.float64, np.uint8, np.int16, np.int32, np.uint16]
    )
    def test_round_trip_dtypes(self, tmp_path, dtype):
        rng = np.random.default_rng(0)
        if np.issubdtype(dtype, np.integer):
            data = rng.integers(0, 100, size=(5, 4, 3)).astype(dtype)
        else:
            data = rng.random((5, 4, 3)).astype(dtype)
        path = tmp_path / "vol.nii.gz"
        write_nifti(path, data, (1.5, 2.0, 2.5), origin=(-3.0, 1.0, 9.5))
        back, spacing, origin = read_nifti(path)
        assert np.array_equal(back, data)
        assert spacing == (1.5, 2.0, 2.5)
        assert origin == (-3.0, 1.0, 9.5)

    def test_uncompressed_round_trip(self, tmp_path):
        data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        path = tmp_path / "vol.nii"
        write_nifti(path, data, (1, 1, 1))
        back, spacing, _ = read_nifti(path)
        assert np.array_equal(back, data)

    def test_write_is_byte_deterministic(self, tmp_path):
        data = np.random.default_rng(1).random((6, 6, 6)).astype(np.float32)
        write_nifti(tmp_path / "a.nii.gz", data, (2, 2, 2))
        write_nifti(tmp_path / "b.nii.gz", data, (2, 2, 2))
        assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_nifti(tmp_path / "nope.nii.gz")

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "bad.nii.gz"
        with gzip.open(path, "wb") as fh:
            fh.write(b"\x00" * 400)
        with pytest.raises(NiftiError):
            read_nifti(path)

    def test_truncated_data_rejected(self, tmp_path):
        path = tmp_path / "vol.nii.gz"
        write_nifti(path, np.zeros((4, 4, 4), dtype=np.float32), (1, 1, 1))
        blob = gzip.decompress(path.read_bytes())
        with gzip.open(path, "wb") as fh:
            fh.write(blob[: 352 + 10])
        with pytest.raises(NiftiError, match="truncated"):
            read_nifti(path)

    def test_scl_slope_applied(self, tmp_path):
        path = tmp_path / "vol.nii.gz"
        write_nifti(path, np.ones((2, 2, 2), dtype=np.int16), (1, 1, 1))
        blob = bytearray(gzip.decompress(path.read_bytes()))
        import struct

        struct.pack_into("<2f", blob, 112, 2.0, 5.0)
        with gzip.open(path, "wb") as fh:
            fh.write(bytes(blob))
        back, _, _ = read_nifti(path)
        assert np.allclose(back, 7.0)


class TestLoadCase:
    def _write_triplet(self, tmp_path, shape=(8, 8, 8), mask_value=1):
        write_nifti(tmp_path / "suv.nii.gz", np.ones(shape, dtype=np.float32), (2, 2, 2))
        write_nifti(tmp_path / "ct.nii.gz", np.zeros(shape, dtype=np.float32), (2, 2, 2))
        mask = np.zeros(shape, dtype=np.uint8)
        mask[2:4, 2:4, 2:4] = mask_value
        write_nifti(tmp_path / "mask.nii.gz", mask, (2, 2, 2))

    def test_well_formed(self, tmp_path):
        self._write_triplet(tmp_path)
        case = load_case("c1", tmp_path / "suv.nii.gz", tmp_path / "ct.nii.gz", tmp_path / "mask.nii.gz")
        assert case.suv.shape == case.ct.shape == case.gt_mask.shape
        assert case.lesion_count == 1

    def test_shape_mismatch(self, tmp_path):
        self._write_triplet(tmp_path)
        write_nifti(tmp_path / "ct.nii.gz", np.zeros((8, 8, 7), dtype=np.float32), (2, 2, 2))
        with pytest.raises(CaseLoadError, match="shape"):
            load_case("c1", tmp_path / "suv.nii.gz", tmp_path / "ct.nii.gz", tmp_path / "mask.nii.gz")

    def test_spacing_mismatch(self, tmp_path):
        self._write_triplet(tmp_path)
        write_nifti(tmp_path / "ct.nii.gz", np.zeros((8, 8, 8), dtype=np.float32), (2, 2, 2.01))
        with pytest.raises(CaseLoadError, match="spacing"):
            load_case("c1", tmp_path / "suv.nii.gz", tmp_path / "ct.nii.gz", tmp_path / "mask.nii.gz")

    def test_non_binary_mask(self, tmp_path):
        self._write_triplet(tmp_path, mask_value=2)
        with pytest.raises(CaseLoadError, match="non-binary"):
            load_case("c1", tmp_path / "suv.nii.gz", tmp_path / "ct.nii.gz", tmp_path / "mask.nii.gz")

    def test_missing_file(self, tmp_path):
        self._write_triplet(tmp_path)
        with pytest.raises(FileNotFoundError):
            load_case("c1", tmp_path / "none.nii.gz", tmp_path / "ct.nii.gz", None)


class TestManifest:
    def test_save_and_iterate(self, tmp_path, small_case):
        entry = save_case(small_case, tmp_path)
        write_manifest({small_case.case_id: entry}, tmp_path / "manifest.json")
        cases = list(iter_manifest_cases(tmp_path / "manifest.json"))
        assert len(cases) == 1
        back = cases[0]
        assert back.case_id == small_case.case_id
        assert np.allclose(back.suv.data, small_case.suv.data)
        assert np.array_equal(back.gt_mask.data, small_case.gt_mask.data)
        assert back.lesion_count == small_case.lesion_count

    def test_manifest_shape_errors(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{}")
        with pytest.raises(CaseLoadError, match="cases"):
            read_manifest(tmp_path / "manifest.json")
