"""Finite-difference checks for every tape operator and all four losses.

Points are drawn away from kinks (relu at 0, pool ties, clip edges) so the
central-difference oracle stays valid; everything runs in float64.
"""

import numpy as np
import pytest

from armsight import losses
from armsight.autodiff import OP_KINDS, Tensor
from fdcheck import fd_gradcheck, weighted_sum

RNG = np.random.default_rng(20240811)


def away_from_zero(shape, low=0.2, high=1.2):
    return RNG.uniform(low, high, shape) * RNG.choice([-1.0, 1.0], shape)


CASES = {
    "add": lambda: ([RNG.standard_normal((3, 4)), RNG.standard_normal((3, 4))],
                    lambda g, ts: weighted_sum(g, g.add(ts[0], ts[1]), RNG)),
    "sub": lambda: ([RNG.standard_normal((3, 4)), RNG.standard_normal((3, 4))],
                    lambda g, ts: weighted_sum(g, g.sub(ts[0], ts[1]), RNG)),
    "mul": lambda: ([RNG.standard_normal((3, 4)), RNG.standard_normal((3, 4))],
                    lambda g, ts: weighted_sum(g, g.mul(ts[0], ts[1]), RNG)),
    "scale": lambda: ([RNG.standard_normal((5,))],
                      lambda g, ts: weighted_sum(g, g.scale(ts[0], -2.7), RNG)),
    "relu": lambda: ([away_from_zero((4, 5))],
                     lambda g, ts: weighted_sum(g, g.relu(ts[0]), RNG)),
    "sigmoid": lambda: ([RNG.standard_normal((4, 5)) * 2],
                        lambda g, ts: weighted_sum(g, g.sigmoid(ts[0]), RNG)),
    "log": lambda: ([RNG.uniform(0.3, 3.0, (4, 5))],
                    lambda g, ts: weighted_sum(g, g.log(ts[0]), RNG)),
    "sqrt": lambda: ([RNG.uniform(0.2, 4.0, (4, 5))],
                     lambda g, ts: weighted_sum(g, g.sqrt(ts[0]), RNG)),
    "clip": lambda: ([np.concatenate([RNG.uniform(-2.0, -1.0, 10),
                                      RNG.uniform(0.2, 0.8, 10),
                                      RNG.uniform(1.5, 2.5, 10)])],
                     lambda g, ts: weighted_sum(g, g.clip(ts[0], 0.0, 1.0), RNG)),
    "softmax": lambda: ([RNG.standard_normal((3, 6)) * 1.5],
                        lambda g, ts: weighted_sum(g, g.softmax(ts[0], axis=-1), RNG)),
    "conv2d": lambda: ([RNG.standard_normal((2, 3, 6, 7)),
                        RNG.standard_normal((4, 3, 3, 3)),
                        RNG.standard_normal(4)],
                       lambda g, ts: weighted_sum(
                           g, g.conv2d(ts[0], ts[1], ts[2], stride=2, padding=1), RNG)),
    "max_pool2x2": lambda: ([RNG.permutation(np.arange(1.0, 65.0)).reshape(1, 2, 4, 8)],
                            lambda g, ts: weighted_sum(g, g.max_pool2x2(ts[0]), RNG)),
    "dense": lambda: ([RNG.standard_normal((4, 5)),
                       RNG.standard_normal((5, 3)),
                       RNG.standard_normal(3)],
                      lambda g, ts: weighted_sum(g, g.dense(ts[0], ts[1], ts[2]), RNG)),
    "nearest_upsample2x": lambda: ([RNG.standard_normal((2, 2, 3, 4))],
                                   lambda g, ts: weighted_sum(
                                       g, g.nearest_upsample2x(ts[0]), RNG)),
    "resize_nearest": lambda: ([RNG.standard_normal((2, 2, 4, 5))],
                               lambda g, ts: weighted_sum(
                                   g, g.resize_nearest(ts[0], (9, 13)), RNG)),
    "flatten": lambda: ([RNG.standard_normal((3, 2, 4))],
                        lambda g, ts: weighted_sum(g, g.flatten(ts[0]), RNG)),
    "reshape": lambda: ([RNG.standard_normal((3, 4))],
                        lambda g, ts: weighted_sum(g, g.reshape(ts[0], (2, 6)), RNG)),
    "concat": lambda: ([RNG.standard_normal((2, 3)), RNG.standard_normal((2, 5))],
                       lambda g, ts: weighted_sum(g, g.concat(ts, axis=1), RNG)),
    "sum": lambda: ([RNG.standard_normal((3, 4, 2))],
                    lambda g, ts: weighted_sum(g, g.sum(ts[0], axis=(1,)), RNG)),
    "mean": lambda: ([RNG.standard_normal((3, 4, 2))],
                     lambda g, ts: weighted_sum(g, g.mean(ts[0], axis=(0, 2)), RNG)),
}


def test_every_op_kind_has_a_case():
    assert set(CASES) == set(OP_KINDS)


@pytest.mark.parametrize("kind", sorted(CASES))
def test_op_gradient(kind):
    for draw in range(3):
        arrays, build = CASES[kind]()
        fd_gradcheck(build, arrays, points=12,
                     rng=np.random.default_rng(hash((kind, draw)) % 2 ** 32))


class TestLossHeadGradients:
    def test_mask_loss(self):
        cw = losses.ClassWeights.from_foreground_fraction(0.1)
        est = RNG.uniform(0.05, 0.95, (2, 1, 5, 6))
        gt = (RNG.random((2, 1, 5, 6)) < 0.3).astype(np.float64)
        fd_gradcheck(lambda g, ts: losses.batched_mask_loss(g, ts[0], gt, cw), [est],
                     points=25)

    def test_joint_coords_loss(self):
        est = RNG.standard_normal((3, 7, 3))
        gt = est + away_from_zero((3, 7, 3), 0.05, 0.4)  # residuals off the sqrt kink
        valid = np.ones((3, 7))
        valid[0, 6] = 0.0
        w = losses.joint_slot_weights(valid, dtype=np.float64)
        fd_gradcheck(lambda g, ts: losses.batched_joint_coords_loss(g, ts[0], gt, w),
                     [est], points=25)

    def test_base_coords_loss(self):
        est = RNG.standard_normal((4, 3))
        gt = est + away_from_zero((4, 3), 0.05, 0.4)
        fd_gradcheck(lambda g, ts: losses.batched_base_coords_loss(g, ts[0], gt),
                     [est], points=12)

    def test_type_loss_through_softmax(self):
        logits = RNG.standard_normal((4, 5)) * 1.5
        onehot = np.eye(5)[RNG.integers(0, 5, 4)]
        fd_gradcheck(
            lambda g, ts: losses.batched_type_loss(g, g.softmax(ts[0], axis=-1), onehot),
            [logits], points=20)

    def test_final_loss_combination(self):
        cw = losses.ClassWeights.from_foreground_fraction(0.12)
        est_m = RNG.uniform(0.1, 0.9, (2, 1, 4, 4))
        gt_m = (RNG.random((2, 1, 4, 4)) < 0.3).astype(np.float64)
        est_j = RNG.standard_normal((2, 7, 3))
        gt_j = est_j + away_from_zero((2, 7, 3), 0.05, 0.4)
        w_j = losses.joint_slot_weights(np.ones((2, 7)), dtype=np.float64)
        est_b = RNG.standard_normal((2, 3))
        gt_b = est_b + away_from_zero((2, 3), 0.05, 0.4)
        logits = RNG.standard_normal((2, 4))
        onehot = np.eye(4)[[0, 2]]

        def build(g, ts):
            ml = losses.batched_mask_loss(g, ts[0], gt_m, cw)
            jl = losses.batched_joint_coords_loss(g, ts[1], gt_j, w_j)
            bl = losses.batched_base_coords_loss(g, ts[2], gt_b)
            tl = losses.batched_type_loss(g, g.softmax(ts[3], axis=-1), onehot)
            final, _ = losses.batched_final_loss(g, ml, jl, bl, tl)
            return final

        fd_gradcheck(build, [est_m, est_j, est_b, logits], points=10)
