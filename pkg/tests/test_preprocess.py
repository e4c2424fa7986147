import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petseg.preprocess import (
    CHANNEL_WINDOWS,
    STANDARD_CHANNELS,
    ChannelStack,
    append_coarse_mask,
    build_channel_stack,
    window_normalize,
)
from petseg.volume import VolumeGrid, VolumeKind


def suv_grid(value, shape=(2, 2, 2), spacing=(2, 2, 2)):
    return VolumeGrid(np.full(shape, value, dtype=np.float32), spacing, kind=VolumeKind.SUV)


def ct_grid(value, shape=(2, 2, 2), spacing=(2, 2, 2)):
    return VolumeGrid(np.full(shape, value, dtype=np.float32), spacing, kind=VolumeKind.HU)


class TestWindowNormalize:
    def test_midpoint_of_suv_window(self):
        out = window_normalize(suv_grid(15.0), 0.0, 30.0)
        assert np.allclose(out.data, 0.5)

    def test_ct_window_endpoints(self):
        assert np.allclose(window_normalize(ct_grid(-150.0), -150.0, 300.0).data, 0.0)
        assert np.allclose(window_normalize(ct_grid(300.0), -150.0, 300.0).data, 1.0)

    def test_hot_window_clamps(self):
        assert np.allclose(window_normalize(suv_grid(1.0), 2.0, 10.0).data, 0.0)
        assert np.allclose(window_normalize(suv_grid(12.0), 2.0, 10.0).data, 1.0)

    def test_invalid_window(self):
        with pytest.raises(ValueError, match="lo < hi"):
            window_normalize(suv_grid(1.0), 5.0, 5.0)

    def test_geometry_preserved(self):
        g = suv_grid(3.0, shape=(3, 4, 5), spacing=(1, 2, 3))
        out = window_normalize(g, 0.0, 30.0)
        assert out.shape == g.shape and out.spacing == g.spacing
        assert out.kind is VolumeKind.PROBABILITY

    @given(st.floats(-50, 50), st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_monotone(self, a, b):
        lo, hi = -20.0, 25.0
        fa = float(window_normalize(suv_grid(min(a, b)), lo, hi).data[0, 0, 0])
        fb = float(window_normalize(suv_grid(max(a, b)), lo, hi).data[0, 0, 0])
        assert fa <= fb + 1e-7

    def test_idempotent_on_unit_window(self):
        values = np.linspace(0, 1, 9, dtype=np.float32).reshape(3, 3, 1)
        g = VolumeGrid(values, (1, 1, 1), kind=VolumeKind.SUV)
        once = window_normalize(g, 0.0, 1.0)
        twice = window_normalize(once.with_data(once.data, VolumeKind.SUV), 0.0, 1.0)
        assert np.allclose(once.data, twice.data, atol=1e-7)


class TestBuildChannelStack:
    def test_five_linear_maps_hand_evaluated(self):
        stack = build_channel_stack(suv_grid(5.0), ct_grid(0.0))
        expected = (5 / 30, 150 / 450, 100 / 200, 1.0, 3 / 8)
        for channel, value in zip(stack.channels, expected):
            assert np.allclose(channel.data, value, atol=1e-6)

    def test_lung_window_lower_bound(self):
        stack = build_channel_stack(suv_grid(0.0), ct_grid(-1000.0))
        lung = dict(zip(stack.channel_names, stack.channels))["CT_Lung"]
        assert np.allclose(lung.data, 0.0)

    def test_channel_count_and_order(self):
        stack = build_channel_stack(suv_grid(1.0), ct_grid(1.0))
        assert len(stack.channels) == 5
        assert stack.channel_names == STANDARD_CHANNELS
        assert [w[0] for w in CHANNEL_WINDOWS] == list(STANDARD_CHANNELS)

    def test_geometry_mismatch(self):
        with pytest.raises(ValueError, match="geometry"):
            build_channel_stack(suv_grid(1.0, shape=(2, 2, 3)), ct_grid(1.0))

    @given(st.floats(-5000, 5000), st.floats(-5000, 5000))
    @settings(max_examples=40, deadline=None)
    def test_bounded_for_arbitrary_inputs(self, suv_value, ct_value):
        stack = build_channel_stack(suv_grid(suv_value), ct_grid(ct_value))
        arr = stack.as_array()
        assert arr.min() >= 0.0 and arr.max() <= 1.0


class TestChannelStack:
    def test_mixed_geometry_rejected(self):
        a = window_normalize(suv_grid(1.0), 0, 30)
        b = window_normalize(suv_grid(1.0, spacing=(3, 3, 3)), 0, 30)
        with pytest.raises(ValueError, match="geometry"):
            ChannelStack((a, b), ("SUV", "CT"))

    def test_append_coarse_mask(self):
        stack = build_channel_stack(suv_grid(1.0), ct_grid(1.0))
        prob = VolumeGrid(
            np.full((2, 2, 2), 0.25, dtype=np.float32), (2, 2, 2), kind=VolumeKind.PROBABILITY
        )
        six = append_coarse_mask(stack, prob)
        assert len(six.channels) == 6
        assert six.channel_names[-1] == "COARSE_MASK"
        with pytest.raises(ValueError, match="standard"):
            append_coarse_mask(six, prob)

    def test_as_array_order(self):
        stack = build_channel_stack(suv_grid(15.0), ct_grid(0.0))
        arr = stack.as_array()
        assert arr.shape == (5, 2, 2, 2)
        assert np.allclose(arr[0], 0.5)
