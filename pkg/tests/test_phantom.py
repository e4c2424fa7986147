import numpy as np
import pytest

from petseg.phantom import (
    HOT_ORGAN_SUV_RANGE,
    PhantomPlacementError,
    PhantomSpec,
    generate_cohort,
    generate_phantom,
)
from petseg.volume import count_components


class TestSpecValidation:
    def test_radius_below_voxel_rejected(self):
        with pytest.raises(ValueError, match="voxel"):
            PhantomSpec(spacing=(4.0, 4.0, 4.0), lesion_radius_range=(3.0, 6.0))

    def test_suv_range_outside_window(self):
        with pytest.raises(ValueError, match="within"):
            PhantomSpec(lesion_suv_range=(1.0, 20.0))

    def test_empty_range_rejected(self):
        with pytest.raises(ValueError):
            PhantomSpec(lesion_radius_range=(10.0, 6.0))


class TestGeneratePhantom:
    def test_deterministic_bit_identical(self):
        spec = PhantomSpec(n_lesions=3, rng_seed=7)
        a = generate_phantom(spec)
        b = generate_phantom(spec)
        assert np.array_equal(a.suv.data, b.suv.data)
        assert np.array_equal(a.ct.data, b.ct.data)
        assert np.array_equal(a.gt_mask.data, b.gt_mask.data)
        assert a.lesion_volume_ml == b.lesion_volume_ml

    def test_negative_control_keeps_hot_foci(self):
        case = generate_phantom(PhantomSpec(n_lesions=0, include_hot_organs=True, rng_seed=3))
        assert case.gt_mask.data.sum() == 0
        assert case.lesion_count == 0
        # hot organs show up as high-uptake voxels despite the empty mask
        assert float(case.suv.data.max()) >= HOT_ORGAN_SUV_RANGE[0]

    def test_single_lesion_volume_matches_analytic_sphere(self):
        spec = PhantomSpec(
            shape=(72, 72, 72),
            spacing=(2.0, 2.0, 2.0),
            n_lesions=1,
            lesion_radius_range=(10.0, 10.0),
            rng_seed=9,
        )
        case = generate_phantom(spec)
        analytic_ml = 4.0 / 3.0 * np.pi * 10.0**3 / 1000.0  # 4.19 mL
        assert abs(case.lesion_volume_ml - analytic_ml) / analytic_ml < 0.15

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 17])
    def test_lesion_count_equals_components(self, seed):
        case = generate_phantom(PhantomSpec(n_lesions=4, rng_seed=seed))
        assert case.lesion_count == 4
        assert count_components(case.gt_mask.data) == 4

    def test_lesion_suv_within_range(self):
        spec = PhantomSpec(n_lesions=3, lesion_suv_range=(6.0, 20.0), rng_seed=21)
        case = generate_phantom(spec)
        inside = case.suv.data[case.gt_mask.data > 0]
        assert inside.min() >= 6.0 - 1e-5
        assert inside.max() <= 20.0 + 1e-5

    def test_ct_tissue_values(self):
        case = generate_phantom(PhantomSpec(rng_seed=2))
        ct = case.ct.data
        body = (ct > -200) & (ct < 200)
        lung = (ct > -900) & (ct < -600)
        assert 0 < ct[body].mean() < 80  # soft tissue
        assert lung.sum() > 0 and -860 < ct[lung].mean() < -720

    def test_placement_failure_raises(self):
        spec = PhantomSpec(
            shape=(24, 16, 16),
            spacing=(2.0, 2.0, 2.0),
            n_lesions=40,
            lesion_radius_range=(8.0, 10.0),
            rng_seed=0,
        )
        with pytest.raises(PhantomPlacementError):
            generate_phantom(spec)


class TestCohort:
    def test_cohort_deterministic_and_mixed(self):
        a = generate_cohort(12, seed=1, shape=(48, 32, 32), spacing=(3, 3, 3), negative_fraction=0.4)
        b = generate_cohort(12, seed=1, shape=(48, 32, 32), spacing=(3, 3, 3), negative_fraction=0.4)
        assert [c.case_id for c in a] == [c.case_id for c in b]
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.suv.data, cb.suv.data)
        counts = [c.lesion_count for c in a]
        assert any(n == 0 for n in counts) and any(n > 0 for n in counts)
