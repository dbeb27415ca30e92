"""Evaluation harness: mask/type accuracy, Euclidean position errors,
error-vs-distance bins, the dataset-size study, and forward timing.

Mask accuracy is measured at the network input resolution against the
downscaled ground-truth mask. Position errors are reported in cm; every
per-sample number also lands in a flat CSV so all medians can be
recomputed independently.
"""

import csv
import json
import os
import platform
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph
from .dataset import Dataset
from .network import preprocess, preprocess_mask, select_joint_outputs
from .robots import get_model
from .training import TrainData, class_weights, evaluate_loss, network_from_checkpoint, transfer

PER_SAMPLE_FIELDS = ("id", "type", "distance", "mask_acc", "joint_err_cm",
                     "base_err_cm", "type_correct")


def mask_accuracy(est_prob, gt_mask, threshold=0.5):
    """Fraction of pixels matching the ground truth after thresholding."""
    est = np.asarray(est_prob)
    gt = np.asarray(gt_mask)
    if est.shape != gt.shape:
        raise ValueError(f"mask_accuracy: shape {est.shape} vs {gt.shape}")
    pred = est >= threshold
    return float(np.mean(pred == (gt > 0.5)))


def position_errors(joints_est, joints_gt, base_est, base_gt):
    """Per-sample (mean joint error cm, base error cm, per-joint errors cm)."""
    je = np.asarray(joints_est, np.float64)
    jg = np.asarray(joints_gt, np.float64)
    if je.shape != jg.shape:
        raise ValueError(f"position_errors: joint shapes {je.shape} vs {jg.shape}")
    per_joint = np.linalg.norm(je - jg, axis=-1) * 100.0
    base_err = float(np.linalg.norm(np.asarray(base_est, np.float64)
                                    - np.asarray(base_gt, np.float64)) * 100.0)
    return float(per_joint.mean()), base_err, per_joint


@dataclass
class EvalReport:
    per_type: dict
    grouped: dict
    overall: dict
    n_samples: int
    split: str

    def as_dict(self):
        return {"per_type": self.per_type, "grouped": self.grouped,
                "overall": self.overall, "n_samples": self.n_samples,
                "split": self.split}


@dataclass
class DistanceBreakdown:
    bin_edges: list
    bins: list    # [{bin_low, bin_high, per_type: {name: {median_err_cm, n}}}]

    def rows(self):
        out = []
        for b in self.bins:
            for name, cell in sorted(b["per_type"].items()):
                out.append({"bin_low": b["bin_low"], "bin_high": b["bin_high"],
                            "type": name, "median_err_cm": cell["median_err_cm"],
                            "n": cell["n"]})
        return out


def _aggregate(rows, pooled_joint_errors):
    if not rows:
        return {}
    return {
        "mask_accuracy": float(np.mean([r["mask_acc"] for r in rows])),
        "type_accuracy": float(np.mean([r["type_correct"] for r in rows])),
        "joint_error_median_cm": float(np.median([r["joint_err_cm"] for r in rows])),
        "base_error_median_cm": float(np.median([r["base_err_cm"] for r in rows])),
        "joint_error_median_pooled_cm": float(np.median(pooled_joint_errors)),
        "count": len(rows),
    }


def evaluate(net, dataset_dir, split="val", mask_threshold=0.5, bin_width=0.25,
             chunk=16):
    """Run the network over one split; returns (EvalReport, DistanceBreakdown,
    per-sample rows). Never reads samples outside `split`."""
    ds = Dataset.load(dataset_dir)
    missing = [c for c in ds.classes if c not in net.classes]
    if missing:
        raise ValueError(f"network does not know classes {missing}")
    indices = ds.split_indices(split)
    if not indices:
        raise ValueError(f"split '{split}' is empty")
    input_hw = tuple(net.descriptor.input_hw)

    rows = []
    pooled = {}   # class name -> list of per-joint errors
    for start in range(0, len(indices), chunk):
        part = indices[start:start + chunk]
        x = np.stack([preprocess(ds.image(i), input_hw) for i in part])
        out = net.predict(x)
        for k, i in enumerate(part):
            s = ds.samples[i]
            cname = ds.class_name(s)
            gt_mask = preprocess_mask(ds.mask(i), input_hw)
            acc = mask_accuracy(out["mask_prob"][k, 0], gt_mask, mask_threshold)
            pred_class = net.classes[int(np.argmax(out["type_dist"][k]))]
            n_j = get_model(cname).joint_count
            est_j = select_joint_outputs(out["joints"][k], n_j)
            jerr, berr, per_joint = position_errors(
                est_j, np.asarray(s["joints_cam"]), out["base"][k],
                np.asarray(s["base_cam"]))
            pooled.setdefault(cname, []).extend(per_joint.tolist())
            rows.append({"id": s["id"], "type": cname, "distance": s["distance"],
                         "mask_acc": acc, "joint_err_cm": jerr, "base_err_cm": berr,
                         "type_correct": int(pred_class == cname)})

    per_type = {}
    for cname in ds.classes:
        sub = [r for r in rows if r["type"] == cname]
        if sub:
            per_type[cname] = _aggregate(sub, pooled[cname])
    grouped = {}
    for fam in sorted({get_model(c).family for c in ds.classes}):
        names = [c for c in ds.classes if get_model(c).family == fam]
        sub = [r for r in rows if r["type"] in names]
        pj = [e for n in names for e in pooled.get(n, [])]
        if sub:
            grouped[fam] = _aggregate(sub, pj)
    overall = _aggregate(rows, [e for v in pooled.values() for e in v])
    report = EvalReport(per_type=per_type, grouped=grouped, overall=overall,
                        n_samples=len(rows), split=split)

    distance_range = ds.manifest.get("camera_distance_range", [1.2, 2.5])
    breakdown = distance_breakdown_from_rows(rows, ds.classes, distance_range, bin_width)
    return report, breakdown, rows


def distance_breakdown_from_rows(rows, classes, distance_range, bin_width=0.25):
    """Per-distance-bin, per-type medians of the per-sample joint errors."""
    lo, hi = distance_range
    edges = list(np.arange(lo, hi, bin_width)) + [hi]
    bins = []
    for b in range(len(edges) - 1):
        blo, bhi = edges[b], edges[b + 1]
        cell = {}
        for cname in classes:
            sub = [r["joint_err_cm"] for r in rows
                   if r["type"] == cname and _in_bin(r["distance"], blo, bhi, b == len(edges) - 2)]
            if sub:
                cell[cname] = {"median_err_cm": float(np.median(sub)), "n": len(sub)}
        bins.append({"bin_low": float(blo), "bin_high": float(bhi), "per_type": cell})
    return DistanceBreakdown(bin_edges=[float(e) for e in edges], bins=bins)


def _in_bin(d, lo, hi, last):
    return lo <= d < hi or (last and d == hi)


def write_eval_outputs(out_dir, report, breakdown, rows):
    """report.json + per_sample.csv + distance_breakdown.csv."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report.as_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "per_sample.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=PER_SAMPLE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    with open(os.path.join(out_dir, "distance_breakdown.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=("bin_low", "bin_high", "type",
                                               "median_err_cm", "n"))
        writer.writeheader()
        writer.writerows(breakdown.rows())


def loss_vs_dataset_size(checkpoint, dataset_dir, sizes, cfg, seed):
    """Transfer once per requested training-set size on a seeded subsample.

    Returns rows {size, val_loss, seconds, seed}; re-running a row with its
    recorded seed reproduces val_loss bit for bit.
    """
    if list(sizes) != sorted(sizes):
        raise ValueError(f"sizes must be ascending, got {sizes}")
    ds = Dataset.load(dataset_dir)
    n_train = len(ds.split_indices("train"))
    rows = []
    for size in sizes:
        if size > n_train:
            raise ValueError(f"size {size} exceeds the train split ({n_train} samples)")
        row_seed = int(np.random.SeedSequence((seed, int(size))).generate_state(1)[0])
        rows.append(run_size_study_row(checkpoint, dataset_dir, int(size), cfg, row_seed))
    return rows


def run_size_study_row(checkpoint, dataset_dir, size, cfg, row_seed):
    ds = Dataset.load(dataset_dir)
    train_idx = np.array(ds.split_indices("train"))
    sub = np.sort(np.random.default_rng(row_seed).choice(train_idx, size, replace=False))
    t0 = time.perf_counter()
    ckpt = transfer(checkpoint, dataset_dir, cfg, train_indices=sub)
    seconds = time.perf_counter() - t0
    net = network_from_checkpoint(ckpt)
    classes = ckpt.classes
    data = TrainData.load(dataset_dir, classes, cfg.input_hw)
    cw = class_weights(data.mask[sub])
    val_loss = evaluate_loss(net, data, data.val_idx, cfg.weights, cw).final
    return {"size": int(size), "val_loss": float(val_loss),
            "seconds": float(seconds), "seed": int(row_seed)}


def write_size_study_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=("size", "val_loss", "seconds", "seed"))
        writer.writeheader()
        writer.writerows(rows)


def timing(net, n_frames=50, warmup=3, seed=0):
    """Wall-clock statistics of single-frame forward passes."""
    if n_frames < 10:
        raise ValueError(f"n_frames must be >= 10, got {n_frames}")
    h, w = net.descriptor.input_hw
    x = np.random.default_rng(seed).random((1, 3, h, w), dtype=np.float32)
    for _ in range(warmup):
        net.predict(x)
    times = []
    for _ in range(n_frames):
        t0 = time.perf_counter()
        net.predict(x)
        times.append((time.perf_counter() - t0) * 1000.0)
    return {
        "mean_ms": float(np.mean(times)),
        "min_ms": float(np.min(times)),
        "max_ms": float(np.max(times)),
        "n_frames": n_frames,
        "input_hw": [h, w],
        "hardware": f"{platform.machine()} / {platform.processor() or 'unknown cpu'} / "
                    f"python {platform.python_version()} / numpy {np.__version__} / "
                    f"threads={os.environ.get('ARMSIGHT_THREADS', '1')}",
    }
