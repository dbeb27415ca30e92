"""Command-line entry point binding the pipeline into reproducible runs.

Every command resolves one JSON config (defaults <- --config file <- flags),
writes the resolved copy plus a MANIFEST of artifact digests into its output
directory, and never mutates its inputs.
"""

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

from . import metrics, runconfig
from .dataset import Dataset, GenerationError, make_dataset
from .render import DegenerateSampleError
from .robots import CANONICAL_ORDER, get_model
from .runconfig import ConfigError
from .training import (CheckpointError, MissingBaseFamilyError, TrainingDiverged,
                       load_checkpoint, network_from_checkpoint, pretrain,
                       save_checkpoint, transfer)

EXIT_OK = 0
EXIT_CONFIG = 2      # invalid flags or configuration
EXIT_MISSING = 3     # input file or directory not found
EXIT_CONTRACT = 4    # input exists but violates a pipeline requirement
EXIT_RUNTIME = 5     # generation/training/checkpoint failure

EPILOG = """exit codes:
  0  success
  2  invalid flags or configuration (unknown keys, unknown robot type, bad values)
  3  missing input file or directory
  4  contract violation (e.g. transfer dataset lacking the base robot family)
  5  runtime failure (generation budget exhausted, diverged training, bad checkpoint)
"""


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir):
    """MANIFEST.json: every artifact under out_dir with size and digest."""
    out = Path(out_dir)
    entries = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "MANIFEST.json":
            entries.append({"path": str(p.relative_to(out)),
                            "bytes": p.stat().st_size, "sha256": _sha256(p)})
    with open(out / "MANIFEST.json", "w") as f:
        json.dump(entries, f, indent=1, sort_keys=True)
        f.write("\n")
    return entries


def _prepare_out(args, command, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runconfig.save_config(out / "run_config.json", cfg, command)
    return out


def _require(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _jsonl_logger(path):
    fh = open(path, "w")

    def log(entry):
        fh.write(json.dumps(entry) + "\n")

    return log, fh


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args):
    overrides = {"seed": args.seed, "generator.n_per_type": args.n_per_type,
                 "generator.types": args.types.split(",") if args.types else None}
    cfg = runconfig.load_config(args.config, overrides)
    types = cfg["generator"]["types"] or list(CANONICAL_ORDER)
    for t in types:
        get_model(t)
    out = _prepare_out(args, "gen-data", cfg)
    ds = make_dataset(out, types, cfg["generator"]["n_per_type"], cfg["seed"],
                      runconfig.generator_config(cfg))
    counts = {c: 0 for c in ds.classes}
    train = {c: 0 for c in ds.classes}
    for s in ds.samples:
        c = ds.class_name(s)
        counts[c] += 1
        train[c] += s["split"] == "train"
    print(f"{'robot type':<12}{'samples':>9}{'train':>8}{'val':>6}")
    for c in ds.classes:
        print(f"{c:<12}{counts[c]:>9}{train[c]:>8}{counts[c] - train[c]:>6}")
    total = len(ds.samples)
    n_train = sum(train.values())
    print(f"{'total':<12}{total:>9}{n_train:>8}{total - n_train:>6}")
    write_manifest(out)
    return EXIT_OK


def cmd_pretrain(args):
    overrides = {"seed": args.seed, "train.total_iters": args.iters,
                 "train.batch_size": args.batch_size}
    cfg = runconfig.load_config(args.config, overrides)
    _require(args.data, "dataset directory")
    out = _prepare_out(args, "pretrain", cfg)
    log, fh = _jsonl_logger(out / "train_log.jsonl")
    try:
        ckpt = pretrain(args.data, runconfig.train_config(cfg), log=log)
    finally:
        fh.close()
    save_checkpoint(out / "pretrain.ckpt", ckpt)
    print(f"pretrained {ckpt.meta['iterations']} iterations on {ckpt.classes}; "
          f"final loss {ckpt.meta['final_loss']:.4f}")
    write_manifest(out)
    return EXIT_OK


def cmd_transfer(args):
    overrides = {"seed": args.seed, "train.total_iters": args.iters,
                 "train.batch_size": args.batch_size,
                 "train.stage2_extra_iters": args.stage2_extra_iters,
                 "train.plateau_window": args.plateau_window,
                 "train.plateau_tau": args.plateau_tau}
    cfg = runconfig.load_config(args.config, overrides)
    _require(args.checkpoint, "checkpoint")
    _require(args.data, "dataset directory")
    ckpt_in = load_checkpoint(args.checkpoint)
    out = _prepare_out(args, "transfer", cfg)
    log, fh = _jsonl_logger(out / "train_log.jsonl")
    try:
        ckpt = transfer(ckpt_in, args.data, runconfig.train_config(cfg), log=log)
    finally:
        fh.close()
    save_checkpoint(out / "transfer.ckpt", ckpt)
    with open(out / "transfer_meta.json", "w") as f:
        json.dump(ckpt.meta, f, indent=1, sort_keys=True)
        f.write("\n")
    m = ckpt.meta
    print(f"stage 1 ended at iteration {m['stage1_end_iter']} "
          f"(plateau loss {m['stage1_plateau_loss']:.4f}); "
          f"stage 2 finished at {m['iterations']} "
          f"(final window loss {m['stage2_final_loss']:.4f})")
    write_manifest(out)
    return EXIT_OK


def cmd_eval(args):
    cfg = runconfig.load_config(args.config, {"seed": args.seed})
    _require(args.checkpoint, "checkpoint")
    _require(args.data, "dataset directory")
    net = network_from_checkpoint(load_checkpoint(args.checkpoint))
    out = _prepare_out(args, "eval", cfg)
    report, breakdown, rows = metrics.evaluate(
        net, args.data, split=args.split,
        mask_threshold=cfg["eval"]["mask_threshold"],
        bin_width=cfg["eval"]["distance_bin_width"])
    metrics.write_eval_outputs(out, report, breakdown, rows)
    print(f"{'type':<10}{'mask acc':>10}{'type acc':>10}{'joint cm':>10}{'base cm':>9}{'n':>6}")
    for name, row in {**report.per_type, "overall": report.overall}.items():
        print(f"{name:<10}{row['mask_accuracy']:>10.3f}{row['type_accuracy']:>10.3f}"
              f"{row['joint_error_median_cm']:>10.2f}{row['base_error_median_cm']:>9.2f}"
              f"{row['count']:>6}")
    write_manifest(out)
    return EXIT_OK


def cmd_bench(args):
    cfg = runconfig.load_config(args.config, {"seed": args.seed})
    _require(args.checkpoint, "checkpoint")
    net = network_from_checkpoint(load_checkpoint(args.checkpoint))
    out = _prepare_out(args, "bench", cfg)
    stats = metrics.timing(net, n_frames=args.frames)
    with open(out / "timing.json", "w") as f:
        json.dump(stats, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"forward pass: mean {stats['mean_ms']:.1f} ms, "
          f"min {stats['min_ms']:.1f} ms, max {stats['max_ms']:.1f} ms "
          f"({stats['hardware']})")
    write_manifest(out)
    return EXIT_OK


def cmd_export_curves(args):
    cfg = runconfig.load_config(args.config, {"seed": args.seed})
    _require(args.eval_dir, "evaluation directory")
    per_sample = Path(args.eval_dir) / "per_sample.csv"
    _require(per_sample, "per-sample dump")
    with open(per_sample, newline="") as f:
        rows = [{"type": r["type"], "distance": float(r["distance"]),
                 "joint_err_cm": float(r["joint_err_cm"])} for r in csv.DictReader(f)]
    classes = [c for c in CANONICAL_ORDER if any(r["type"] == c for r in rows)]
    if args.data:
        distance_range = Dataset.load(args.data).manifest["camera_distance_range"]
    else:
        distance_range = runconfig.default_config()["generator"]["distance_range"]
    breakdown = metrics.distance_breakdown_from_rows(
        rows, classes, distance_range, cfg["eval"]["distance_bin_width"])
    out = _prepare_out(args, "export-curves", cfg)
    with open(out / "error_vs_distance.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=("bin_low", "bin_high", "type",
                                               "median_err_cm", "n"))
        writer.writeheader()
        writer.writerows(breakdown.rows())
    print(f"error_vs_distance.csv: {len(breakdown.rows())} rows")

    if args.sizes:
        if not (args.checkpoint and args.data):
            raise ConfigError("--sizes needs --checkpoint and --data to run the study")
        sizes = [int(s) for s in args.sizes.split(",")]
        tcfg = runconfig.train_config(cfg)
        study = metrics.loss_vs_dataset_size(load_checkpoint(args.checkpoint),
                                             args.data, sizes, tcfg, cfg["seed"])
        metrics.write_size_study_csv(out / "loss_vs_size.csv", study)
        for row in study:
            print(f"size {row['size']:>5}: val_loss {row['val_loss']:.4f} "
                  f"in {row['seconds']:.1f}s (seed {row['seed']})")
    write_manifest(out)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="armsight",
        description="Synthetic robot-arm perception pipeline: data generation, "
                    "multi-objective training, two-stage transfer, evaluation.",
        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n-per-type", type=int, help="samples per robot type")
    p.add_argument("--types", help="comma-separated robot types "
                   f"(catalog: {', '.join(CANONICAL_ORDER)})")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="full training on the base family")
    common(p)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--iters", type=int, help="total training iterations")
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("transfer", help="two-stage transfer to new robot types")
    common(p)
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    p.add_argument("--data", required=True, help="mixed dataset directory")
    p.add_argument("--iters", type=int, help="stage-1 iteration cap")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--stage2-extra-iters", type=int)
    p.add_argument("--plateau-window", type=int)
    p.add_argument("--plateau-tau", type=float)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("val", "train"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time single-frame forward passes")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", type=int, default=50)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-curves", help="plot-ready CSVs from a finished run")
    common(p)
    p.add_argument("--eval-dir", required=True, help="directory with per_sample.csv")
    p.add_argument("--data", help="dataset directory (distance range source)")
    p.add_argument("--checkpoint", help="checkpoint for the dataset-size study")
    p.add_argument("--sizes", help="comma-separated training-set sizes to study")
    p.set_defaults(func=cmd_export_curves)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except MissingBaseFamilyError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except (CheckpointError, GenerationError, TrainingDiverged, DegenerateSampleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
