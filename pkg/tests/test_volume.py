import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petseg.volume import (
    CaseRecord,
    ResampleMode,
    VolumeGrid,
    VolumeKind,
    count_components,
    patient_id_of,
    resample,
    resample_like,
)


def grid(data, spacing=(1, 1, 1), kind=VolumeKind.SUV, origin=(0, 0, 0)):
    return VolumeGrid(np.asarray(data), spacing, origin, kind)


class TestVolumeGrid:
    def test_rejects_non_positive_spacing(self):
        with pytest.raises(ValueError, match="spacing"):
            grid(np.zeros((2, 2, 2)), spacing=(1, 0, 1))

    def test_rejects_non_3d(self):
        with pytest.raises(ValueError, match="3D"):
            grid(np.zeros((2, 2)))

    def test_mask_must_be_binary(self):
        with pytest.raises(ValueError, match="BINARY_MASK"):
            grid(np.full((2, 2, 2), 2, dtype=np.uint8), kind=VolumeKind.BINARY_MASK)

    def test_probability_bounds(self):
        with pytest.raises(ValueError, match="PROBABILITY"):
            grid(np.full((2, 2, 2), 1.5), kind=VolumeKind.PROBABILITY)

    def test_label_map_non_negative_integers(self):
        with pytest.raises(ValueError, match="LABEL_MAP"):
            grid(np.full((2, 2, 2), -1, dtype=np.int32), kind=VolumeKind.LABEL_MAP)
        with pytest.raises(ValueError, match="LABEL_MAP"):
            grid(np.zeros((2, 2, 2), dtype=np.float32), kind=VolumeKind.LABEL_MAP)

    def test_rejects_nan_intensities(self):
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            grid(data)

    def test_data_is_locked(self):
        g = grid(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            g.data[0, 0, 0] = 1.0

    def test_voxel_volume(self):
        assert grid(np.zeros((2, 2, 2)), spacing=(2, 3, 4)).voxel_volume_mm3 == 24.0


class TestResample:
    def test_identity_is_exact(self):
        data = np.random.default_rng(0).random((8, 7, 6)).astype(np.float32)
        g = grid(data, spacing=(2, 2, 2))
        out = resample(g, (2, 2, 2), ResampleMode.LINEAR)
        assert np.array_equal(out.data, data)
        assert out.spacing == (2.0, 2.0, 2.0)

    def test_constant_grid_stays_constant(self):
        g = grid(np.full((8, 8, 8), 5.0, dtype=np.float32), spacing=(2, 2, 2))
        out = resample(g, (3.1, 2.7, 5.0), ResampleMode.LINEAR)
        assert np.allclose(out.data, 5.0, atol=1e-6)

    def test_linear_on_mask_rejected(self):
        g = grid(np.zeros((4, 4, 4), dtype=np.uint8), kind=VolumeKind.BINARY_MASK)
        with pytest.raises(ValueError, match="NEAREST"):
            resample(g, (2, 2, 2), ResampleMode.LINEAR)

    def test_sphere_volume_preserved_at_6mm(self):
        # 12 mm radius sphere voxelized at 2 mm, NEAREST-resampled to 6 mm:
        # volume must stay within 20% of the analytic 4/3*pi*r^3
        shape, spacing, r = (32, 32, 32), 2.0, 12.0
        centre = (np.array(shape) * spacing) / 2
        ax = [(np.arange(n) + 0.5) * spacing - c for n, c in zip(shape, centre)]
        d2 = (
            ax[0][:, None, None] ** 2
            + ax[1][None, :, None] ** 2
            + ax[2][None, None, :] ** 2
        )
        mask = grid((d2 <= r**2).astype(np.uint8), spacing=(2, 2, 2), kind=VolumeKind.BINARY_MASK)
        out = resample(mask, (6, 6, 6), ResampleMode.NEAREST)
        analytic = 4.0 / 3.0 * np.pi * r**3
        volume = float(out.data.sum()) * out.voxel_volume_mm3
        assert abs(volume - analytic) / analytic < 0.20
        assert set(np.unique(out.data)) <= {0, 1}

    def test_extent_preserved_within_one_voxel(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            shape = tuple(int(rng.integers(4, 40)) for _ in range(3))
            s_in = tuple(float(rng.uniform(0.5, 5.0)) for _ in range(3))
            s_out = tuple(float(rng.uniform(0.5, 8.0)) for _ in range(3))
            g = grid(np.zeros(shape, dtype=np.float32), spacing=s_in)
            out = resample(g, s_out, ResampleMode.LINEAR)
            for n_in, si, n_out, so in zip(shape, s_in, out.shape, s_out):
                assert abs(n_out * so - n_in * si) <= so

    def test_nearest_never_invents_labels(self):
        rng = np.random.default_rng(7)
        labels = rng.integers(0, 5, size=(9, 7, 11)).astype(np.int32)
        labels[labels == 3] = 4  # leave a hole in the label set
        g = grid(labels, spacing=(1.5, 2.0, 1.0), kind=VolumeKind.LABEL_MAP)
        out = resample(g, (2.4, 0.9, 1.7), ResampleMode.NEAREST)
        assert set(np.unique(out.data)) <= set(np.unique(labels))

    def test_round_trip_of_smooth_volume(self, small_case):
        suv = small_case.suv
        down = resample(suv, (6, 6, 6), ResampleMode.LINEAR)
        back = resample_like(down, suv, ResampleMode.LINEAR)
        dynamic = float(suv.data.max() - suv.data.min())
        err = float(np.abs(back.data - suv.data).mean())
        assert err < 0.05 * dynamic

    def test_resample_like_matches_geometry(self, small_case):
        down = resample(small_case.suv, (6.5, 6.5, 6.5), ResampleMode.LINEAR)
        back = resample_like(down, small_case.suv, ResampleMode.LINEAR)
        assert back.shape == small_case.suv.shape
        assert back.spacing == small_case.suv.spacing

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_nearest_keeps_masks_binary(self, seed):
        rng = np.random.default_rng(seed)
        mask = (rng.random((6, 6, 6)) < 0.3).astype(np.uint8)
        g = grid(mask, spacing=(2, 2, 2), kind=VolumeKind.BINARY_MASK)
        target = tuple(float(rng.uniform(0.8, 6.0)) for _ in range(3))
        out = resample(g, target, ResampleMode.NEAREST)
        assert set(np.unique(out.data)) <= {0, 1}


class TestCaseRecord:
    def test_geometry_mismatch_rejected(self):
        suv = grid(np.zeros((4, 4, 4), dtype=np.float32))
        ct = VolumeGrid(np.zeros((4, 4, 5), dtype=np.float32), (1, 1, 1), kind=VolumeKind.HU)
        with pytest.raises(ValueError, match="geometry mismatch"):
            CaseRecord.from_volumes("c", suv, ct)

    def test_stats_derived_from_mask(self):
        mask = np.zeros((6, 6, 6), dtype=np.uint8)
        mask[1, 1, 1] = 1
        mask[4, 4, 4] = 1
        case = CaseRecord.from_volumes(
            "c",
            grid(np.zeros((6, 6, 6), dtype=np.float32), spacing=(2, 2, 2)),
            VolumeGrid(np.zeros((6, 6, 6), dtype=np.float32), (2, 2, 2), kind=VolumeKind.HU),
            VolumeGrid(mask, (2, 2, 2), kind=VolumeKind.BINARY_MASK),
        )
        assert case.lesion_count == 2 == count_components(mask)
        assert case.lesion_volume_ml == pytest.approx(2 * 8 / 1000.0)

    def test_patient_key_strips_study_suffix(self):
        assert patient_id_of("pat0042_s01") == "pat0042"
        assert patient_id_of("pat0042") == "pat0042"
        assert patient_id_of("study_s1_s2") == "study_s1"
