"""Objective terms: MIL cross-entropy, area constraint, and composition."""

import math

import numpy as np
import pytest

from milseg.backbone import BackboneConfig, build_network, forward
from milseg.losses import (Bag, LossBreakdown, LossWeights, area_constraint_loss,
                           mil_loss, predict_mask, side_loss, total_loss)
from milseg.pooling import gm_pool, gm_pool_grad
from milseg.tensor import Tape, backward


def _image(rng, size=16):
    return rng.uniform(0, 1, size=(3, size, size)).astype(np.float32)


class TestBag:
    def test_label_validation(self):
        with pytest.raises(ValueError):
            Bag(image=np.zeros((3, 4, 4), np.float32), label=2)

    def test_area_range(self):
        with pytest.raises(ValueError):
            Bag(image=np.zeros((3, 4, 4), np.float32), label=1, area=1.5)

    def test_negative_bag_must_have_zero_area(self):
        with pytest.raises(ValueError):
            Bag(image=np.zeros((3, 4, 4), np.float32), label=0, area=0.2)


class TestMilLoss:
    def test_perfect_positive_is_near_zero(self):
        assert mil_loss(1, 1 - 1e-9) == pytest.approx(0.0, abs=1e-8)

    def test_uncertain_negative_is_ln2(self):
        assert mil_loss(0, 0.5) == pytest.approx(math.log(2), abs=1e-12)

    def test_symmetry_at_half(self):
        assert mil_loss(1, 0.5) == mil_loss(0, 0.5)

    def test_bad_label_rejected(self):
        with pytest.raises(ValueError):
            mil_loss(-1, 0.5)


class TestAreaConstraint:
    def test_negative_bag_gated_to_zero(self):
        bag = Bag(image=np.zeros((3, 4, 4), np.float32), label=0)
        assert area_constraint_loss(bag, 0.73) == 0.0

    def test_exact_match_is_zero(self):
        bag = Bag(image=np.zeros((3, 4, 4), np.float32), label=1, area=0.3)
        assert area_constraint_loss(bag, 0.3) == 0.0

    def test_squared_gap(self):
        bag = Bag(image=np.zeros((3, 4, 4), np.float32), label=1, area=0.3)
        assert area_constraint_loss(bag, 0.5) == pytest.approx(0.04, abs=1e-12)


class TestSideLoss:
    def _bags(self):
        img = np.zeros((3, 4, 4), np.float32)
        return [Bag(image=img, label=1, area=0.3), Bag(image=img, label=0)]

    def test_zero_weight_reduces_to_mil(self):
        bags = self._bags()
        weights = LossWeights(eta_side=(0.0, 1.0, 1.0))
        value = side_loss(0, bags, [0.8, 0.2], [0.5, 0.4], weights)
        assert value == pytest.approx(mil_loss(1, 0.8) + mil_loss(0, 0.2), abs=1e-12)

    def test_perfect_positive_bag(self):
        bag = Bag(image=np.zeros((3, 4, 4), np.float32), label=1, area=0.3)
        weights = LossWeights()
        value = side_loss(0, [bag], [1 - 1e-9], [0.3], weights)
        assert value == pytest.approx(0.0, abs=1e-8)

    def test_additivity_against_single_term_oracles(self):
        bags = self._bags()
        weights = LossWeights(eta_side=(2.5, 5.0, 10.0))
        probs, pos = [0.8, 0.2], [0.5, 0.4]
        expected = (mil_loss(1, 0.8) + mil_loss(0, 0.2)
                    + 2.5 * (area_constraint_loss(bags[0], 0.5)
                             + area_constraint_loss(bags[1], 0.4)))
        assert side_loss(0, bags, probs, pos, weights) == pytest.approx(expected,
                                                                        abs=1e-12)

    def test_misaligned_lists_rejected(self):
        with pytest.raises(ValueError):
            side_loss(0, self._bags(), [0.5], [0.5, 0.5], LossWeights())


class TestTotalLoss:
    def test_breakdown_identities(self):
        rng = np.random.default_rng(0)
        net = build_network(BackboneConfig(), seed=0)
        bags = [Bag(image=_image(rng), label=1, area=0.3),
                Bag(image=_image(rng), label=0)]
        outs = [forward(net, b.image) for b in bags]
        bd = total_loss(bags, outs, LossWeights())
        assert bd.total == bd.side_sum + bd.fuse_sum
        assert bd.side_sum == sum(
            m + eta * a
            for m, a, eta in zip(bd.mil_side, bd.ac_side, bd.weights.eta_side))
        assert bd.total == pytest.approx(bd.loss.item(), rel=1e-12)
        assert all(v >= 0 for v in bd.mil_side + bd.ac_side)
        assert bd.mil_fuse >= 0 and bd.ac_fuse >= 0

    def test_baseline_reduction_single_layer_no_constraints(self):
        # T = 1, eta = 0, fusion weight 1: the objective must equal twice
        # the plain MIL loss of the single map (side term + identical fused
        # term), and the fused map must equal the side map.
        rng = np.random.default_rng(1)
        config = BackboneConfig(stages=((2, 8),), fusion_weights=(1.0,))
        net = build_network(config, seed=1)
        bags = [Bag(image=_image(rng), label=1, area=0.3),
                Bag(image=_image(rng), label=0)]
        outs = [forward(net, b.image) for b in bags]
        weights = LossWeights(eta_side=(0.0,), eta_fuse=0.0)
        bd = total_loss(bags, outs, weights, r=4.0)
        expected = sum(
            mil_loss(b.label, gm_pool(o.side_maps[0].data, 4.0))
            for b, o in zip(bags, outs))
        assert bd.mil_side[0] == pytest.approx(expected, abs=1e-12)
        assert bd.mil_fuse == pytest.approx(expected, abs=1e-12)
        # zero weights null the constraint contribution even on positives
        assert bd.side_sum == bd.mil_side[0]
        assert bd.fuse_sum == bd.mil_fuse
        assert bd.total == pytest.approx(2 * expected, abs=1e-12)

    def test_all_negative_dataset_has_zero_ac_terms(self):
        rng = np.random.default_rng(2)
        net = build_network(BackboneConfig(), seed=2)
        bags = [Bag(image=_image(rng), label=0) for _ in range(3)]
        outs = [forward(net, b.image) for b in bags]
        bd = total_loss(bags, outs, LossWeights())
        assert bd.ac_side == (0.0, 0.0, 0.0)
        assert bd.ac_fuse == 0.0

    def test_gradients_flow_to_all_parameters(self):
        rng = np.random.default_rng(3)
        net = build_network(BackboneConfig(stages=((1, 4), (1, 4)),
                                           fusion_weights=(0.5, 0.5)), seed=3)
        bags = [Bag(image=_image(rng), label=1, area=0.25),
                Bag(image=_image(rng), label=0)]
        with Tape():
            outs = [forward(net, b.image) for b in bags]
            bd = total_loss(bags, outs, LossWeights(eta_side=(2.5, 5.0)))
            backward(bd.loss)
        for name, p in net.parameters():
            assert p.grad is not None, name
            assert np.isfinite(p.grad).all(), name

    def test_negative_bag_pushes_every_pixel_down(self):
        # dL/dp_k = gm_grad_k / (1 - GM) > 0 for a negative bag, so the
        # objective pressures every instance probability downward.
        rng = np.random.default_rng(4)
        probs = rng.uniform(0.05, 0.95, size=64)
        grad = gm_pool_grad(probs, 4.0)
        gm = gm_pool(probs, 4.0)
        d_loss = grad / (1.0 - gm)
        assert (d_loss > 0).all()

    def test_ac_gradient_direction(self):
        # positive bag with positiveness above the estimate: increasing any
        # pixel increases the constraint term
        rng = np.random.default_rng(5)
        net = build_network(BackboneConfig(), seed=5)
        bag = Bag(image=_image(rng), label=1, area=0.05)
        out = forward(net, bag.image)
        v = float(out.fused.data.mean())
        assert v > bag.area
        step = 1e-4
        map_data = out.fused.data.copy().astype(np.float64).ravel()
        base = (map_data.mean() - bag.area) ** 2
        for k in rng.integers(0, map_data.size, size=10):
            bumped = map_data.copy()
            bumped[k] += step
            assert (bumped.mean() - bag.area) ** 2 > base

    def test_missing_fused_map_rejected(self):
        rng = np.random.default_rng(6)
        net = build_network(BackboneConfig(), seed=6)
        bag = Bag(image=_image(rng), label=0)
        out = forward(net, bag.image)
        out.fused = None
        with pytest.raises(ValueError, match="fused"):
            total_loss([bag], [out], LossWeights())

    def test_weight_count_mismatch_rejected(self):
        rng = np.random.default_rng(7)
        net = build_network(BackboneConfig(), seed=7)
        bag = Bag(image=_image(rng), label=0)
        out = forward(net, bag.image)
        with pytest.raises(ValueError):
            total_loss([bag], [out], LossWeights(eta_side=(1.0,)))


class TestLossBreakdownAccumulate:
    def test_accumulate_sums_terms(self):
        w = LossWeights()
        a = LossBreakdown((1.0, 2.0, 3.0), (0.1, 0.2, 0.3), 4.0, 0.4, w)
        b = LossBreakdown((1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 1.0, 0.0, w)
        acc = LossBreakdown.accumulate([a, b])
        assert acc.mil_side == (2.0, 3.0, 4.0)
        assert acc.mil_fuse == 5.0
        assert acc.total == acc.side_sum + acc.fuse_sum


class TestPredictMask:
    def _outputs(self, values):
        from milseg.backbone import SideOutputs
        from milseg.tensor import Tensor
        fused = Tensor(np.asarray(values, dtype=np.float32)[None, None])
        return SideOutputs(side_maps=[fused], fused=fused)

    def test_high_map_all_positive(self):
        mask = predict_mask(self._outputs(np.full((4, 4), 0.9)), 0.5)
        assert mask.all()

    def test_low_map_all_negative(self):
        mask = predict_mask(self._outputs(np.full((4, 4), 0.1)), 0.5)
        assert not mask.any()

    def test_strict_inequality_and_tie_rule(self):
        values = np.array([[0.49, 0.5], [0.51, 0.9]])
        mask = predict_mask(self._outputs(values), 0.5)
        np.testing.assert_array_equal(mask, [[False, False], [True, True]])

    def test_threshold_range_validated(self):
        with pytest.raises(ValueError):
            predict_mask(self._outputs(np.zeros((2, 2)) + 0.4), 1.5)
