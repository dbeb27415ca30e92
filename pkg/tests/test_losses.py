"""Loss-function oracles: hand-computed values, invariances, and agreement
between the reference (plain float) route and the batched graph route."""

import math

import numpy as np
import pytest

from armsight import losses
from armsight.autodiff import Graph, Tensor

CW10 = losses.ClassWeights.from_foreground_fraction(0.1)


class TestClassWeights:
    def test_inverse_probability(self):
        cw = losses.ClassWeights.from_foreground_fraction(0.1)
        assert abs(cw.w_fg - 10.0) < 1e-12
        assert abs(cw.w_bg - 1.0 / 0.9) < 1e-12

    def test_symmetric_at_half(self):
        cw = losses.ClassWeights.from_foreground_fraction(0.5)
        assert cw.w_fg == cw.w_bg == 2.0

    def test_product_invariants(self):
        for p in (0.06, 0.17, 0.22, 0.5, 0.9):
            cw = losses.ClassWeights.from_foreground_fraction(p)
            assert abs(cw.w_fg * cw.p_fg - 1.0) < 1e-9
            assert abs(cw.w_bg * (1.0 - cw.p_fg) - 1.0) < 1e-9

    def test_from_masks(self):
        masks = [np.zeros((10, 10)), np.ones((10, 10))]
        cw = losses.class_weights(masks)
        assert cw.p_fg == 0.5

    def test_ur_band_weights(self):
        # foreground fractions 6-17% give w_fg between ~5.88 and ~16.67
        lo = losses.class_weights([np.r_[np.ones(17), np.zeros(83)]])
        hi = losses.class_weights([np.r_[np.ones(6), np.zeros(94)]])
        assert abs(lo.w_fg - 1 / 0.17) < 1e-9 and 5.88 < lo.w_fg < 5.89
        assert abs(hi.w_fg - 1 / 0.06) < 1e-9 and 16.66 < hi.w_fg < 16.67

    def test_degenerate_split_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            losses.class_weights([np.ones((4, 4))])
        with pytest.raises(ValueError, match="degenerate"):
            losses.class_weights([np.zeros((4, 4))])


class TestPixelLoss:
    def test_perfect_prediction_zero(self):
        # residual bounded by the clamp: w * -log(1 - eps) ~= w * 1e-7
        assert losses.pixel_loss(1.0, 1.0, CW10) <= CW10.w_fg * 1.01e-7
        assert losses.pixel_loss(0.0, 0.0, CW10) <= CW10.w_bg * 1.01e-7

    def test_foreground_half(self):
        assert abs(losses.pixel_loss(0.5, 1.0, CW10) - 10 * math.log(2)) < 1e-6
        assert abs(losses.pixel_loss(0.5, 1.0, CW10) - 6.9315) < 1e-4

    def test_background_half(self):
        assert abs(losses.pixel_loss(0.5, 0.0, CW10) - math.log(2) / 0.9) < 1e-6
        assert abs(losses.pixel_loss(0.5, 0.0, CW10) - 0.7702) < 1e-4


class TestMaskLoss:
    def test_mean_of_constant_pixels(self):
        est = np.full((2, 2), 0.5)
        gt = np.ones((2, 2))
        assert abs(losses.mask_loss(est, gt, CW10) - 10 * math.log(2)) < 1e-6

    def test_perfect_mask_below_clamp_epsilon(self):
        gt = (np.random.default_rng(0).random((8, 8)) < 0.3).astype(float)
        assert losses.mask_loss(gt, gt, CW10) < 1e-5

    def test_tiling_invariance(self):
        rng = np.random.default_rng(1)
        est = rng.uniform(0.1, 0.9, (6, 6))
        gt = (rng.random((6, 6)) < 0.4).astype(float)
        one = losses.mask_loss(est, gt, CW10)
        tiled = losses.mask_loss(np.tile(est, (2, 2)), np.tile(gt, (2, 2)), CW10)
        assert abs(one - tiled) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            losses.mask_loss(np.ones((2, 2)), np.ones((2, 3)), CW10)


class TestCoordLosses:
    def test_exact_zero(self):
        j = np.random.default_rng(0).random((6, 3))
        assert losses.joint_coords_loss(j, j) == 0.0
        b = np.array([0.3, -0.2, 1.5])
        assert losses.base_coords_loss(b, b) == 0.0

    def test_345_triangle_offset(self):
        j = np.random.default_rng(1).random((6, 3))
        e = j + np.array([0.03, 0.0, 0.04])
        assert abs(losses.joint_coords_loss(j, e) - 0.05) < 1e-9

    def test_single_joint_off_in_seven(self):
        j = np.zeros((7, 3))
        e = j.copy()
        e[3, 0] = 0.07
        assert abs(losses.joint_coords_loss(j, e) - 0.01) < 1e-9

    def test_base_345(self):
        b = np.zeros(3)
        assert abs(losses.base_coords_loss(b, [0.03, 0.04, 0.0]) - 0.05) < 1e-9

    def test_base_sqrt9(self):
        b = np.zeros(3)
        assert abs(losses.base_coords_loss(b, [0.01, 0.02, 0.02]) - 0.03) < 1e-9

    def test_count_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            losses.joint_coords_loss(np.zeros((6, 3)), np.zeros((7, 3)))

    def test_translation_invariance_and_scaling(self):
        rng = np.random.default_rng(2)
        j, e = rng.random((7, 3)), rng.random((7, 3))
        shift = rng.random(3)
        assert abs(losses.joint_coords_loss(j, e)
                   - losses.joint_coords_loss(j + shift, e + shift)) < 1e-12
        base = losses.joint_coords_loss(j, e)
        scaled = losses.joint_coords_loss(j, j + 3.0 * (e - j))
        assert abs(scaled - 3.0 * base) < 1e-12
        assert abs(losses.base_coords_loss(j[0], e[0])
                   - losses.base_coords_loss(j[0] + shift, e[0] + shift)) < 1e-12


class TestTypeLoss:
    def test_probability_one_on_truth(self):
        p = np.array([0.0, 1.0, 0.0])
        assert losses.type_loss(p, p) < 1e-6

    def test_uniform_five_classes(self):
        p = np.eye(5)[2]
        q = np.full(5, 0.2)
        assert abs(losses.type_loss(p, q) - math.log(5)) < 1e-6
        assert abs(losses.type_loss(p, q) - 1.6094) < 1e-4

    def test_permutation_symmetry(self):
        rng = np.random.default_rng(3)
        q = rng.dirichlet(np.ones(5))
        p = np.eye(5)[1]
        perm = rng.permutation(5)
        assert abs(losses.type_loss(p, q) - losses.type_loss(p[perm], q[perm])) < 1e-12

    def test_not_onehot_rejected(self):
        with pytest.raises(ValueError, match="one-hot"):
            losses.type_loss(np.array([0.5, 0.5]), np.array([0.5, 0.5]))

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError, match="sums to"):
            losses.type_loss(np.array([1.0, 0.0]), np.array([0.9, 0.2]))


class TestFinalLoss:
    def test_default_weights_exact(self):
        w = losses.DEFAULT_LOSS_WEIGHTS
        assert (w.mask, w.jcoords, w.bcoords, w.type_) == (1.2, 1.2, 1.2, 0.6)

    def test_unit_components(self):
        bd = losses.final_loss(1.0, 1.0, 1.0, 1.0)
        assert abs(bd.final - 4.2) < 1e-9

    def test_all_zero(self):
        assert losses.final_loss(0.0, 0.0, 0.0, 0.0).final == 0.0

    def test_weight_linearity(self):
        w2 = losses.LossWeights(2.4, 2.4, 2.4, 1.2)
        a = losses.final_loss(0.3, 0.7, 0.2, 1.1)
        b = losses.final_loss(0.3, 0.7, 0.2, 1.1, w2)
        assert abs(b.final - 2 * a.final) < 1e-12

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            losses.final_loss(float("nan"), 0.0, 0.0, 0.0)


class TestImbalanceShortcut:
    """The inverse-probability weighting makes the expected-loss-minimizing
    constant prediction 0.5 regardless of the foreground fraction, so the
    all-background shortcut never wins."""

    @pytest.mark.parametrize("p_fg", [0.05, 0.10, 0.17, 0.22])
    def test_optimal_constant_prediction_is_half(self, p_fg):
        n = 10000
        n_fg = int(round(p_fg * n))
        gt = np.r_[np.ones(n_fg), np.zeros(n - n_fg)]
        cw = losses.class_weights([gt])
        qs = np.arange(0.001, 1.0, 0.001)
        vals = [losses.mask_loss(np.full(n, q), gt, cw) for q in qs]
        q_best = qs[int(np.argmin(vals))]
        assert abs(q_best - 0.5) <= 0.01

    @pytest.mark.parametrize("p_fg", [0.05, 0.3])
    def test_all_background_prediction_loses_to_half(self, p_fg):
        n = 2000
        gt = np.r_[np.ones(int(p_fg * n)), np.zeros(n - int(p_fg * n))]
        cw = losses.class_weights([gt])
        assert losses.mask_loss(np.full(n, 0.01), gt, cw) > \
            losses.mask_loss(np.full(n, 0.5), gt, cw)


class TestBatchedRouteAgreesWithReference:
    def test_mask_loss_routes(self):
        rng = np.random.default_rng(7)
        est = rng.uniform(0.02, 0.98, (3, 1, 6, 5))
        gt = (rng.random((3, 1, 6, 5)) < 0.25).astype(np.float64)
        g = Graph()
        got = losses.batched_mask_loss(g, Tensor(est), gt, CW10).item()
        want = losses.mask_loss(est, gt, CW10)
        assert abs(got - want) < 1e-9

    def test_joint_loss_routes(self):
        rng = np.random.default_rng(8)
        est = rng.standard_normal((4, 7, 3))
        gt = rng.standard_normal((4, 7, 3))
        valid = np.ones((4, 7))
        valid[2, 6] = 0.0
        g = Graph()
        got = losses.batched_joint_coords_loss(
            g, Tensor(est), gt, losses.joint_slot_weights(valid, np.float64)).item()
        per_sample = [losses.joint_coords_loss(gt[i, :6 if i == 2 else 7],
                                               est[i, :6 if i == 2 else 7])
                      for i in range(4)]
        assert abs(got - np.mean(per_sample)) < 1e-7

    def test_base_loss_routes(self):
        rng = np.random.default_rng(9)
        est, gt = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        g = Graph()
        got = losses.batched_base_coords_loss(g, Tensor(est), gt).item()
        want = np.mean([losses.base_coords_loss(gt[i], est[i]) for i in range(5)])
        assert abs(got - want) < 1e-8

    def test_type_loss_routes(self):
        rng = np.random.default_rng(10)
        q = rng.dirichlet(np.ones(5), size=6)
        onehot = np.eye(5)[rng.integers(0, 5, 6)]
        g = Graph()
        got = losses.batched_type_loss(g, Tensor(q), onehot).item()
        want = np.mean([losses.type_loss(onehot[i], q[i]) for i in range(6)])
        assert abs(got - want) < 1e-9

    def test_final_breakdown_recombination(self):
        g = Graph()
        parts = [Tensor(np.asarray(v)) for v in (0.5, 1.5, 0.25, 2.0)]
        final, bd = losses.batched_final_loss(g, *parts)
        w = losses.DEFAULT_LOSS_WEIGHTS
        recombined = (w.mask * bd.mask + w.jcoords * bd.jcoords
                      + w.bcoords * bd.bcoords + w.type_ * bd.type_)
        assert abs(bd.final - recombined) < 1e-6
        assert abs(final.item() - bd.final) < 1e-12
