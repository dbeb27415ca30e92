"""The four training objectives and their weighted combination.

Plain-numpy reference versions (floats in, float out) sit next to the
graph builders used during training; tests hold the two routes against
each other. Coordinate losses are computed in meters, probabilities are
clamped to (PROB_EPS, 1 - PROB_EPS) before any logarithm.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

PROB_EPS = 1e-7


@dataclass(frozen=True)
class ClassWeights:
    """Inverse-probability weights for the mask pixels."""

    w_fg: float
    w_bg: float
    p_fg: float

    @staticmethod
    def from_foreground_fraction(p_fg):
        p_fg = float(p_fg)
        if not 0.0 < p_fg < 1.0:
            raise ValueError(f"foreground fraction must be in (0,1), got {p_fg}")
        return ClassWeights(w_fg=1.0 / p_fg, w_bg=1.0 / (1.0 - p_fg), p_fg=p_fg)


@dataclass(frozen=True)
class LossWeights:
    mask: float = 1.2
    jcoords: float = 1.2
    bcoords: float = 1.2
    type_: float = 0.6

    def as_dict(self):
        return {"mask": self.mask, "jcoords": self.jcoords,
                "bcoords": self.bcoords, "type": self.type_}

    @staticmethod
    def from_dict(d):
        return LossWeights(mask=float(d["mask"]), jcoords=float(d["jcoords"]),
                           bcoords=float(d["bcoords"]), type_=float(d["type"]))


DEFAULT_LOSS_WEIGHTS = LossWeights()


@dataclass
class LossBreakdown:
    mask: float
    jcoords: float
    bcoords: float
    type_: float
    final: float

    def as_dict(self):
        return {"mask": self.mask, "jcoords": self.jcoords,
                "bcoords": self.bcoords, "type": self.type_, "final": self.final}


def class_weights(train_masks):
    """Weights from the pooled foreground fraction of the training split."""
    fg = 0
    total = 0
    for m in train_masks:
        arr = np.asarray(m)
        fg += int(np.count_nonzero(arr))
        total += arr.size
    if total == 0:
        raise ValueError("class_weights: no mask pixels given")
    if fg == 0 or fg == total:
        raise ValueError(
            f"class_weights: degenerate split ({fg}/{total} foreground), weights undefined")
    return ClassWeights.from_foreground_fraction(fg / total)


def _clamp(p):
    return min(max(float(p), PROB_EPS), 1.0 - PROB_EPS)


def pixel_loss(i_est, i_gt, weights):
    """Weighted binary cross-entropy for a single pixel."""
    p = _clamp(i_est)
    t = float(i_gt)
    return -weights.w_fg * t * math.log(p) - weights.w_bg * (1.0 - t) * math.log(1.0 - p)


def mask_loss(est_map, gt_mask, weights):
    """Mean weighted cross-entropy over all pixels of one mask."""
    est = np.asarray(est_map, dtype=np.float64)
    gt = np.asarray(gt_mask, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"mask_loss: shape {est.shape} vs {gt.shape}")
    p = np.clip(est, PROB_EPS, 1.0 - PROB_EPS)
    l = -(weights.w_fg * gt * np.log(p) + weights.w_bg * (1.0 - gt) * np.log(1.0 - p))
    return float(l.mean())


def joint_coords_loss(joints_gt, joints_est):
    """Mean Euclidean distance over the joints, meters."""
    j = np.asarray(joints_gt, dtype=np.float64)
    e = np.asarray(joints_est, dtype=np.float64)
    if j.shape != e.shape:
        raise ValueError(f"joint_coords_loss: shape {j.shape} vs {e.shape}")
    return float(np.linalg.norm(j - e, axis=-1).mean())


def base_coords_loss(base_gt, base_est):
    """Euclidean distance between estimated and true base position, meters."""
    b = np.asarray(base_gt, dtype=np.float64)
    e = np.asarray(base_est, dtype=np.float64)
    if b.shape != e.shape:
        raise ValueError(f"base_coords_loss: shape {b.shape} vs {e.shape}")
    return float(np.linalg.norm(b - e))


def type_loss(p_onehot, q_dist):
    """Categorical cross-entropy against a one-hot label."""
    p = np.asarray(p_onehot, dtype=np.float64)
    q = np.asarray(q_dist, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"type_loss: shape {p.shape} vs {q.shape}")
    if not (np.all((p == 0) | (p == 1)) and p.sum() == 1):
        raise ValueError("type_loss: label is not one-hot")
    if abs(q.sum() - 1.0) > 1e-6:
        raise ValueError(f"type_loss: distribution sums to {q.sum()}, not 1")
    qc = np.clip(q, PROB_EPS, 1.0)
    return float(-(p * np.log(qc)).sum())


def final_loss(mask, jcoords, bcoords, type_, weights=DEFAULT_LOSS_WEIGHTS):
    parts = (mask, jcoords, bcoords, type_)
    if not all(math.isfinite(v) for v in parts):
        raise ValueError(f"final_loss: non-finite component in {parts}")
    final = (weights.mask * mask + weights.jcoords * jcoords
             + weights.bcoords * bcoords + weights.type_ * type_)
    return LossBreakdown(mask=mask, jcoords=jcoords, bcoords=bcoords,
                         type_=type_, final=final)


# -- graph builders used by the training loop ------------------------------

def batched_mask_loss(g, est, gt_masks, weights):
    """est: [B,1,H,W] probabilities, gt_masks: same-shape 0/1 array."""
    gt = np.asarray(gt_masks, dtype=est.dtype)
    if gt.shape != est.shape:
        raise ValueError(f"batched_mask_loss: shape {gt.shape} vs {est.shape}")
    p = g.clip(est, PROB_EPS, 1.0 - PROB_EPS)
    fg_term = g.mul(Tensor(weights.w_fg * gt), g.log(p))
    one = Tensor(np.ones_like(gt))
    bg_term = g.mul(Tensor(weights.w_bg * (1.0 - gt)), g.log(g.sub(one, p)))
    return g.scale(g.mean(g.add(fg_term, bg_term)), -1.0)


def joint_slot_weights(joint_valid, dtype=np.float32):
    """Per-slot weights [B,max_joints]: 1/N_j on real joints, 0 on padding."""
    valid = np.asarray(joint_valid, dtype=np.float64)
    counts = valid.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("joint_slot_weights: sample with zero valid joints")
    return (valid / counts).astype(dtype)


def batched_joint_coords_loss(g, est, joints_gt, slot_weights):
    """est: [B,J,3]; padded slots carry zero weight and are excluded."""
    gt = np.asarray(joints_gt, dtype=est.dtype)
    if gt.shape != est.shape:
        raise ValueError(f"batched_joint_coords_loss: shape {gt.shape} vs {est.shape}")
    d = g.sub(est, Tensor(gt))
    dist = g.sqrt(g.sum(g.mul(d, d), axis=2), eps=1e-18)
    per_sample = g.sum(g.mul(dist, Tensor(np.asarray(slot_weights, dtype=est.dtype))), axis=1)
    return g.mean(per_sample)


def batched_base_coords_loss(g, est, base_gt):
    """est: [B,3]."""
    gt = np.asarray(base_gt, dtype=est.dtype)
    if gt.shape != est.shape:
        raise ValueError(f"batched_base_coords_loss: shape {gt.shape} vs {est.shape}")
    d = g.sub(est, Tensor(gt))
    return g.mean(g.sqrt(g.sum(g.mul(d, d), axis=1), eps=1e-18))


def batched_type_loss(g, type_dist, onehot):
    """type_dist: [B,R] distributions, onehot: same-shape labels."""
    p = np.asarray(onehot, dtype=type_dist.dtype)
    if p.shape != type_dist.shape:
        raise ValueError(f"batched_type_loss: shape {p.shape} vs {type_dist.shape}")
    q = g.clip(type_dist, PROB_EPS, 1.0)
    per_sample = g.sum(g.mul(Tensor(p), g.log(q)), axis=1)
    return g.scale(g.mean(per_sample), -1.0)


def batched_final_loss(g, mask_l, jcoords_l, bcoords_l, type_l, weights=DEFAULT_LOSS_WEIGHTS):
    """Weighted sum as a graph node; returns (scalar tensor, LossBreakdown)."""
    final = g.add(
        g.add(g.scale(mask_l, weights.mask), g.scale(jcoords_l, weights.jcoords)),
        g.add(g.scale(bcoords_l, weights.bcoords), g.scale(type_l, weights.type_)),
    )
    breakdown = LossBreakdown(
        mask=mask_l.item(), jcoords=jcoords_l.item(), bcoords=bcoords_l.item(),
        type_=type_l.item(), final=final.item(),
    )
    return final, breakdown
