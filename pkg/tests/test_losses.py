import math

import numpy as np
import pytest
import torch

from petseg.losses import (
    LossWeights,
    combined_loss,
    composite_loss_from_prob,
    cross_entropy_loss,
    deep_supervision_scale_weights,
    lesion_probability,
    sensitivity_loss,
    soft_dice_loss,
)

LN2 = 0.6931471805599453
LN_1_PLUS_E2 = 2.1269280110429727  # -log(sigmoid(-2)) = log(1 + e^2)


def _finite_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        up = float(fn(x))
        flat[i] = orig - h
        down = float(fn(x))
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def _rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = torch.maximum(a.abs(), b.abs()).clamp(min=1e-4)
    return float(((a - b).abs() / denom).max())


class TestSoftDice:
    def test_perfect_prediction(self):
        g = (torch.rand(4, 4, 4) > 0.5).double()
        assert float(soft_dice_loss(g, g)) < 1e-5

    def test_disjoint_prediction(self):
        gt = torch.zeros(4, 4, 4)
        gt[:2] = 1.0
        prob = 1.0 - gt
        assert float(soft_dice_loss(prob, gt)) > 0.999

    def test_hand_sum_half_half(self):
        # 8 voxels, gt covers 4, prob uniform 0.5:
        # 1 - (2*2 + eps) / (4 + 4 + eps) ~= 0.5
        gt = torch.tensor([1.0, 1, 1, 1, 0, 0, 0, 0]).reshape(2, 2, 2)
        prob = torch.full((2, 2, 2), 0.5)
        eps = 1e-5
        expected = 1 - (2 * 2 + eps) / (4 + 4 + eps)
        assert float(soft_dice_loss(prob, gt, eps)) == pytest.approx(expected, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="geometry"):
            soft_dice_loss(torch.zeros(2, 2, 2), torch.zeros(2, 2, 3))


class TestCrossEntropy:
    def test_strong_correct_logits(self):
        gt = (torch.rand(4, 4, 4) > 0.5).long()
        logits = torch.stack([(1 - gt).float() * 50, gt.float() * 50])
        assert float(cross_entropy_loss(logits, gt)) < 1e-6

    def test_uniform_logits_give_ln2(self):
        gt = (torch.rand(3, 3, 3) > 0.5).long()
        logits = torch.zeros(2, 3, 3, 3)
        assert float(cross_entropy_loss(logits, gt)) == pytest.approx(LN2, abs=1e-7)

    def test_single_voxel_margin_two_wrong(self):
        gt = torch.ones(1, 1, 1, dtype=torch.long)
        logits = torch.zeros(2, 1, 1, 1)
        logits[0] = 2.0  # wrong class ahead by margin 2
        assert float(cross_entropy_loss(logits, gt)) == pytest.approx(LN_1_PLUS_E2, abs=1e-7)

    def test_batched_matches_unbatched(self):
        gt = (torch.rand(2, 3, 3, 3) > 0.5).long()
        logits = torch.randn(2, 2, 3, 3, 3)
        batched = float(cross_entropy_loss(logits, gt))
        single = np.mean(
            [float(cross_entropy_loss(logits[i], gt[i])) for i in range(2)]
        )
        assert batched == pytest.approx(single, abs=1e-6)


class TestSensitivity:
    def test_full_recall(self):
        gt = torch.zeros(4, 4, 4)
        gt[1:3] = 1.0
        assert float(sensitivity_loss(gt.clone(), gt)) < 1e-5

    def test_zero_recall(self):
        gt = torch.zeros(4, 4, 4)
        gt[0, 0, 0] = 1.0
        assert float(sensitivity_loss(torch.zeros_like(gt), gt)) > 0.999

    def test_empty_gt_returns_zero(self):
        prob = torch.rand(4, 4, 4)
        assert float(sensitivity_loss(prob, torch.zeros(4, 4, 4))) == 0.0

    def test_no_gradient_outside_gt(self):
        # the derivative w.r.t. predictions on background voxels must vanish:
        # predicted mass outside gt is invisible to this term
        gt = torch.zeros(3, 3, 3)
        gt[0, 0, 0] = 1.0
        prob = torch.rand(3, 3, 3, dtype=torch.float64, requires_grad=True)
        sensitivity_loss(prob, gt).backward()
        outside = prob.grad[gt == 0]
        assert torch.all(outside == 0)
        assert prob.grad[0, 0, 0] != 0


class TestCombined:
    def test_perfect_prediction_near_zero(self):
        gt = torch.zeros(4, 4, 4, dtype=torch.long)
        gt[1:3, 1:3, 1:3] = 1
        logits = torch.stack([(1 - gt).float() * 40, gt.float() * 40])
        assert float(combined_loss(logits, None, gt)) < 1e-4

    def test_single_scale_weighting_formula(self):
        torch.manual_seed(0)
        gt = (torch.rand(4, 4, 4) > 0.7).long()
        logits = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        prob = lesion_probability(logits)
        w = LossWeights()
        expected = (
            w.dice_w * float(soft_dice_loss(prob, gt.double(), w.epsilon))
            + w.ce_w * float(cross_entropy_loss(logits, gt))
            + w.sens_w * float(sensitivity_loss(prob, gt.double(), w.epsilon))
        )
        assert float(combined_loss(logits, None, gt, w)) == pytest.approx(expected, rel=1e-10)

    def test_example_terms_weighting(self):
        # dice 0.4, ce 0.2, sens 0.1 -> 0.4 + 0.5*0.2 + 2*0.1 = 0.7
        assert 0.4 + LossWeights().ce_w * 0.2 + LossWeights().sens_w * 0.1 == pytest.approx(0.7)

    def test_zero_weights_zero_loss(self):
        w = LossWeights(dice_w=0.0, ce_w=0.0, sens_w=0.0)
        gt = (torch.rand(4, 4, 4) > 0.5).long()
        logits = torch.randn(2, 4, 4, 4)
        assert float(combined_loss(logits, None, gt, w)) == 0.0

    def test_scale_weights_normalized_and_halving(self):
        w = deep_supervision_scale_weights(4)
        assert sum(w) == pytest.approx(1.0)
        assert w[0] == pytest.approx(2 * w[1]) and w[1] == pytest.approx(2 * w[2])

    def test_deep_supervision_uses_downsampled_gt(self):
        torch.manual_seed(1)
        gt = (torch.rand(8, 8, 8) > 0.6).long()
        main = torch.randn(2, 8, 8, 8, dtype=torch.float64)
        aux = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        total = float(combined_loss(main, [main, aux], gt))
        w = deep_supervision_scale_weights(2)
        expected = w[0] * float(combined_loss(main, None, gt))
        gt_small = torch.nn.functional.interpolate(
            gt[None, None].float(), size=(4, 4, 4), mode="nearest"
        )[0, 0]
        expected += w[1] * float(combined_loss(aux, None, gt_small.long()))
        assert total == pytest.approx(expected, rel=1e-9)

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            LossWeights(dice_w=-1.0)
        with pytest.raises(ValueError):
            LossWeights(epsilon=0.0)


class TestGradients:
    @pytest.mark.parametrize("trial", range(20))
    def test_loss_gradients_match_finite_differences(self, trial):
        torch.manual_seed(100 + trial)
        gt = (torch.rand(4, 4, 4) > 0.6).double()

        prob = torch.rand(4, 4, 4, dtype=torch.float64) * 0.9 + 0.05
        for fn in (
            lambda p: soft_dice_loss(p, gt),
            lambda p: sensitivity_loss(p, gt),
            lambda p: composite_loss_from_prob(p, gt),
        ):
            x = prob.clone().requires_grad_(True)
            fn(x).backward()
            numeric = _finite_difference(fn, prob.clone())
            assert _rel_err(x.grad, numeric) < 1e-3

        logits = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        for fn in (
            lambda l: cross_entropy_loss(l, gt.long()),
            lambda l: combined_loss(l, None, gt.long()),
        ):
            x = logits.clone().requires_grad_(True)
            fn(x).backward()
            numeric = _finite_difference(fn, logits.clone())
            assert _rel_err(x.grad, numeric) < 1e-3
