"""Training engine: full pretraining plus two-stage transfer learning.

Stage 1 of a transfer run updates only stage1_trainable parameters until
the windowed plateau test fires (or the iteration cap is hit); stage 2
additionally unlocks stage2_unlockable parameters. trunk_frozen blobs
must come out of a transfer bit-identical, which the checkpoint meta
records as digests for auditing.
"""

import binascii
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, sgd_step, zero_grad
from .dataset import Dataset
from .losses import (LossBreakdown, LossWeights, batched_base_coords_loss,
                     batched_final_loss, batched_joint_coords_loss, batched_mask_loss,
                     batched_type_loss, class_weights, joint_slot_weights)
from .network import (ArchitectureDescriptor, DESK_INPUT_HW, MAX_JOINTS, Network,
                      desk_architecture, grow_type_head, preprocess, preprocess_mask)
from .robots import get_model

CHECKPOINT_MAGIC = b"AMNT"
CHECKPOINT_VERSION = 1
_BATCH_SALT = 0xBA7C4


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the exception carries the diagnostic dump."""

    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


class CheckpointError(ValueError):
    """Unreadable or corrupted checkpoint file."""


class MissingBaseFamilyError(ValueError):
    """Transfer dataset violates the mixed-dataset requirement."""


@dataclass
class TrainConfig:
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    total_iters: int = 3000
    batch_size: int = 8
    plateau_window: int = 500
    plateau_tau: float = 0.005
    stage2_extra_iters: int = 4000
    weights: LossWeights = field(default_factory=LossWeights)
    momentum: float = 0.9
    class_weight_scope: str = "dataset"   # or "batch"
    input_hw: tuple = DESK_INPUT_HW
    seed: int = 0

    def validate(self):
        if not self.lr_start > self.lr_end > 0:
            raise ValueError(f"need lr_start > lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.plateau_window < 100:
            raise ValueError(f"plateau_window must be >= 100, got {self.plateau_window}")
        if not 0 < self.plateau_tau < 1:
            raise ValueError(f"plateau_tau must be in (0,1), got {self.plateau_tau}")
        if self.class_weight_scope not in ("dataset", "batch"):
            raise ValueError(f"unknown class_weight_scope {self.class_weight_scope}")
        return self

    def as_dict(self):
        return {"lr_start": self.lr_start, "lr_end": self.lr_end,
                "total_iters": self.total_iters, "batch_size": self.batch_size,
                "plateau_window": self.plateau_window, "plateau_tau": self.plateau_tau,
                "stage2_extra_iters": self.stage2_extra_iters,
                "weights": self.weights.as_dict(), "momentum": self.momentum,
                "class_weight_scope": self.class_weight_scope,
                "input_hw": list(self.input_hw), "seed": self.seed}

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights.from_dict(d["weights"])
        if "input_hw" in d:
            d["input_hw"] = tuple(d["input_hw"])
        return TrainConfig(**d).validate()


def lr_schedule(iteration, cfg):
    """Geometric interpolation from lr_start at 0 to lr_end at total_iters."""
    if not 0 <= iteration <= cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters}]")
    frac = iteration / cfg.total_iters
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


def plateau_detector(loss_history, window, tau):
    """True when the last window stopped improving over the one before it."""
    if len(loss_history) < 2 * window:
        raise ValueError(f"need >= {2 * window} entries, got {len(loss_history)}")
    prev = float(np.mean(loss_history[-2 * window:-window]))
    recent = float(np.mean(loss_history[-window:]))
    if prev <= 0:
        return True
    return (prev - recent) / prev < tau


# -- training data -----------------------------------------------------------

@dataclass
class TrainData:
    x: np.ndarray            # [N,3,h,w] float32 in [0,1]
    mask: np.ndarray         # [N,1,h,w] float32 0/1, network resolution
    joints: np.ndarray       # [N,MAX_JOINTS,3] float32, zero-padded slots
    joint_valid: np.ndarray  # [N,MAX_JOINTS] float32
    base: np.ndarray         # [N,3] float32
    type_idx: np.ndarray     # [N] int64 into `classes`
    onehot: np.ndarray       # [N,R] float32
    distance: np.ndarray     # [N] float64
    train_idx: np.ndarray
    val_idx: np.ndarray
    classes: list
    class_weights: object = None

    @staticmethod
    def load(dataset_dir, classes, input_hw=DESK_INPUT_HW):
        """Preprocess a dataset directory against a class list.

        `classes` gives the network's class order; every class present in
        the dataset must appear in it.
        """
        ds = Dataset.load(dataset_dir)
        missing = [c for c in ds.classes if c not in classes]
        if missing:
            raise ValueError(f"dataset classes {missing} not in network classes {classes}")
        remap = {i: classes.index(c) for i, c in enumerate(ds.classes)}
        n = len(ds.samples)
        r = len(classes)
        h, w = input_hw
        x = np.empty((n, 3, h, w), np.float32)
        mask = np.empty((n, 1, h, w), np.float32)
        joints = np.zeros((n, MAX_JOINTS, 3), np.float32)
        valid = np.zeros((n, MAX_JOINTS), np.float32)
        base = np.empty((n, 3), np.float32)
        tidx = np.empty(n, np.int64)
        dist = np.empty(n, np.float64)
        for i, s in enumerate(ds.samples):
            x[i] = preprocess(ds.image(i), input_hw)
            mask[i, 0] = preprocess_mask(ds.mask(i), input_hw)
            jc = np.asarray(s["joints_cam"], np.float32)
            joints[i, :len(jc)] = jc
            valid[i, :len(jc)] = 1.0
            base[i] = s["base_cam"]
            tidx[i] = remap[s["robot_type"]]
            dist[i] = s["distance"]
        onehot = np.zeros((n, r), np.float32)
        onehot[np.arange(n), tidx] = 1.0
        train_idx = np.array(ds.split_indices("train"))
        val_idx = np.array(ds.split_indices("val"))
        data = TrainData(x=x, mask=mask, joints=joints, joint_valid=valid, base=base,
                         type_idx=tidx, onehot=onehot, distance=dist,
                         train_idx=train_idx, val_idx=val_idx, classes=list(classes))
        data.class_weights = class_weights(mask[train_idx])
        return data


def batch_losses(graph, net, data, indices, weights, cw):
    """Forward + the four losses for a batch; returns (final, breakdown)."""
    outs, _ = net.forward(data.x[indices], graph)
    ml = batched_mask_loss(graph, outs.mask_prob, data.mask[indices], cw)
    jl = batched_joint_coords_loss(graph, outs.joints, data.joints[indices],
                                   joint_slot_weights(data.joint_valid[indices]))
    bl = batched_base_coords_loss(graph, outs.base, data.base[indices])
    tl = batched_type_loss(graph, outs.type_dist, data.onehot[indices])
    return batched_final_loss(graph, ml, jl, bl, tl, weights)


def evaluate_loss(net, data, indices, weights, cw, chunk=32):
    """Mean loss breakdown over `indices`, exact over uneven chunks."""
    indices = np.asarray(indices)
    sums = np.zeros(5)
    for start in range(0, len(indices), chunk):
        part = indices[start:start + chunk]
        g = Graph()
        _, bd = batch_losses(g, net, data, part, weights, cw)
        sums += len(part) * np.array([bd.mask, bd.jcoords, bd.bcoords, bd.type_, bd.final])
    sums /= len(indices)
    return LossBreakdown(mask=sums[0], jcoords=sums[1], bcoords=sums[2],
                         type_=sums[3], final=sums[4])


def run_stage(net, data, cfg, *, stage, start_iter, max_iters, trainable_groups,
              use_plateau, rng, log=None):
    """One training stage; returns (loss history, plateaued flag)."""
    net.set_trainable_groups(trainable_groups)
    params = net.parameters()
    cw = data.class_weights
    history = []
    for k in range(max_iters):
        it = start_iter + k
        lr = lr_schedule(min(it, cfg.total_iters), cfg)
        batch = data.train_idx[rng.integers(0, len(data.train_idx), size=cfg.batch_size)]
        if cfg.class_weight_scope == "batch":
            cw = class_weights(data.mask[batch])
        g = Graph()
        final, bd = batch_losses(g, net, data, batch, cfg.weights, cw)
        if not np.isfinite(bd.final):
            dump = {"event": "nan_abort", "iter": it, "stage": stage, "lr": lr,
                    "batch": [int(i) for i in batch], **bd.as_dict()}
            if log:
                log(dump)
            raise TrainingDiverged(f"non-finite loss at iteration {it}", dump)
        zero_grad(params)
        g.backward(final)
        sgd_step(params, lr, cfg.momentum)
        history.append(bd.final)
        if log:
            log({"iter": it, "stage": stage, **bd.as_dict(), "lr": lr})
        if use_plateau and len(history) >= 2 * cfg.plateau_window and \
                plateau_detector(history, cfg.plateau_window, cfg.plateau_tau):
            return history, True
    return history, False


def _window_mean(history, window):
    return float(np.mean(history[-window:])) if history else float("nan")


def pretrain(dataset_dir, cfg, descriptor=None, log=None):
    """Full training on the base robot family; all layer groups trainable."""
    cfg.validate()
    ds = Dataset.load(dataset_dir)
    families = {get_model(c).family for c in ds.classes}
    if len(families) != 1:
        raise ValueError(f"pretraining dataset must hold one robot family, got {families}")
    classes = list(ds.classes)
    data = TrainData.load(dataset_dir, classes, cfg.input_hw)
    descriptor = descriptor or desk_architecture(cfg.input_hw, num_classes=len(classes))
    net = Network.build(descriptor, classes, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _BATCH_SALT)))
    history, _ = run_stage(net, data, cfg, stage="pretrain", start_iter=0,
                           max_iters=cfg.total_iters, trainable_groups=set(("trunk_frozen",
                           "stage2_unlockable", "stage1_trainable")),
                           use_plateau=False, rng=rng, log=log)
    meta = {
        "stage": "pretrain",
        "iterations": len(history),
        "seed": cfg.seed,
        "train_config": cfg.as_dict(),
        "final_loss": history[-1],
        "final_window_loss": _window_mean(history, min(cfg.plateau_window, len(history))),
        "class_weights": {"w_fg": data.class_weights.w_fg,
                          "w_bg": data.class_weights.w_bg,
                          "p_fg": data.class_weights.p_fg},
    }
    return checkpoint_from_network(net, meta)


def transfer(checkpoint, dataset_dir, cfg, log=None, train_indices=None):
    """Two-stage transfer onto a mixed dataset holding old and new types.

    train_indices optionally restricts training to a subset of the train
    split (absolute sample indices); used by the dataset-size study.
    """
    cfg.validate()
    ds = Dataset.load(dataset_dir)
    missing = [c for c in checkpoint.classes if c not in ds.classes]
    if missing:
        raise MissingBaseFamilyError(
            f"transfer dataset must include the base family the network was trained on; "
            f"missing {missing}")
    new = [c for c in ds.classes if c not in checkpoint.classes]
    if not new:
        raise MissingBaseFamilyError("transfer dataset adds no new robot type")

    net = network_from_checkpoint(checkpoint)
    classes = list(checkpoint.classes) + new
    net = grow_type_head(net, classes, seed=cfg.seed)
    if tuple(cfg.input_hw) != tuple(net.descriptor.input_hw):
        raise ValueError(f"checkpoint input size {net.descriptor.input_hw} != "
                         f"config {cfg.input_hw}")
    data = TrainData.load(dataset_dir, classes, cfg.input_hw)
    if train_indices is not None:
        train_indices = np.asarray(train_indices)
        outside = set(train_indices.tolist()) - set(data.train_idx.tolist())
        if outside:
            raise ValueError(f"train_indices outside the train split: {sorted(outside)[:5]}")
        data.train_idx = train_indices
        data.class_weights = class_weights(data.mask[train_indices])
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _BATCH_SALT)))

    blobs_before = {n: p.values.tobytes() for n, p in net.params.items()}
    digests_before = _group_digests(net)

    hist1, plateaued1 = run_stage(
        net, data, cfg, stage="transfer_stage1", start_iter=0, max_iters=cfg.total_iters,
        trainable_groups={"stage1_trainable"}, use_plateau=True, rng=rng, log=log)
    stage1_changed = [n for n, p in net.params.items()
                      if p.values.tobytes() != blobs_before[n]]
    digests_stage1 = _group_digests(net)
    stage1_plateau_loss = _window_mean(hist1, min(cfg.plateau_window, len(hist1)))

    hist2, plateaued2 = run_stage(
        net, data, cfg, stage="transfer_stage2", start_iter=len(hist1),
        max_iters=cfg.stage2_extra_iters,
        trainable_groups={"stage1_trainable", "stage2_unlockable"},
        use_plateau=True, rng=rng, log=log)
    stage2_final_loss = _window_mean(hist2, min(cfg.plateau_window, len(hist2)))

    meta = {
        "stage": "transfer",
        "iterations": len(hist1) + len(hist2),
        "stage1_end_iter": len(hist1),
        "stage1_plateaued": plateaued1,
        "stage2_plateaued": plateaued2,
        "stage1_plateau_loss": stage1_plateau_loss,
        "stage2_final_loss": stage2_final_loss,
        "stage1_changed_params": stage1_changed,
        "group_digests": {"before": digests_before, "after_stage1": digests_stage1,
                          "after_stage2": _group_digests(net)},
        "seed": cfg.seed,
        "train_config": cfg.as_dict(),
        "base_classes": list(checkpoint.classes),
        "new_classes": new,
        "class_weights": {"w_fg": data.class_weights.w_fg,
                          "w_bg": data.class_weights.w_bg,
                          "p_fg": data.class_weights.p_fg},
    }
    return checkpoint_from_network(net, meta)


def _group_digests(net):
    return {g: hashlib.sha256(blob).hexdigest() for g, blob in net.group_blobs().items()}


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    descriptor: dict
    classes: list
    groups: dict              # param name -> stage tag
    params: dict              # param name -> float32 ndarray
    meta: dict

    def forward_outputs(self, x):
        return network_from_checkpoint(self).predict(x)


def checkpoint_from_network(net, meta):
    return Checkpoint(descriptor=net.descriptor.as_dict(), classes=list(net.classes),
                      groups=dict(net.groups),
                      params={n: p.values.copy() for n, p in net.params.items()},
                      meta=meta)


def network_from_checkpoint(ckpt):
    desc = ArchitectureDescriptor.from_dict(ckpt.descriptor)
    net = Network.build(desc, ckpt.classes, seed=0)
    for name, arr in ckpt.params.items():
        if name not in net.params:
            raise CheckpointError(f"checkpoint parameter {name} unknown to the descriptor")
        if net.params[name].values.shape != arr.shape:
            raise CheckpointError(f"parameter {name}: shape {arr.shape} != "
                                  f"{net.params[name].values.shape}")
        net.params[name].values[...] = arr
    net.groups = dict(ckpt.groups)
    return net


def save_checkpoint(path, ckpt):
    """Binary layout: magic, u32 version, u64 header length, JSON header,
    then little-endian float32 blobs in header order (crc32 per blob)."""
    tensors = []
    blobs = []
    for name, arr in ckpt.params.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape),
                        "byte_len": len(blob), "crc32": binascii.crc32(blob)})
        blobs.append(blob)
    header = json.dumps({
        "descriptor": ckpt.descriptor, "classes": ckpt.classes,
        "groups": ckpt.groups, "meta": ckpt.meta, "tensors": tensors,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    pos = 16 + hlen
    params = {}
    for t in header["tensors"]:
        blob = data[pos:pos + t["byte_len"]]
        if len(blob) != t["byte_len"]:
            raise CheckpointError(f"{path}: truncated blob for {t['name']}")
        if binascii.crc32(blob) != t["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch for {t['name']}")
        arr = np.frombuffer(blob, dtype="<f4").reshape(t["shape"]).copy()
        if arr.size != int(np.prod(t["shape"])):
            raise CheckpointError(f"{path}: blob length mismatch for {t['name']}")
        params[t["name"]] = arr
        pos += t["byte_len"]
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return Checkpoint(descriptor=header["descriptor"], classes=header["classes"],
                      groups=header["groups"], params=params, meta=header["meta"])
