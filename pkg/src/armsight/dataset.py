"""Dataset generation and the on-disk layout.

A dataset directory holds images/ (binary PPM), masks/ (binary PGM,
values 0/255) and one dataset.json manifest. Every sample is produced
from an RNG stream derived from (seed, sample index), so the output is
byte-identical no matter how many workers ARMSIGHT_THREADS allows.
"""

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraModel, sample_camera
from .render import (BackgroundSpec, DegenerateSampleError,
                     estimate_foreground_fraction, render)
from .robots import CANONICAL_ORDER, forward_kinematics, get_model, sample_configuration

MANIFEST_VERSION = 1
MANIFEST_NAME = "dataset.json"
_SPLIT_SALT = 0x5EED5EED  # split shuffle gets its own stream off the dataset seed
TRAIN_FRACTION = 0.8


class GenerationError(RuntimeError):
    """No acceptable sample found within the attempt budget."""


@dataclass
class GeneratorConfig:
    image_size: tuple = (480, 360)
    fx: float = 620.0
    fy: float = 620.0
    distance_range: tuple = (1.2, 2.5)
    elevation_range: tuple = (0.15, 1.05)
    fg_band: tuple = (0.05, 0.22)
    max_sample_attempts: int = 80
    background: BackgroundSpec = field(default_factory=BackgroundSpec)

    def as_dict(self):
        return {
            "image_size": list(self.image_size),
            "fx": self.fx, "fy": self.fy,
            "distance_range": list(self.distance_range),
            "elevation_range": list(self.elevation_range),
            "fg_band": list(self.fg_band),
            "max_sample_attempts": self.max_sample_attempts,
            "background": {
                "rect_range": list(self.background.rect_range),
                "ellipse_range": list(self.background.ellipse_range),
                "distractor_range": list(self.background.distractor_range),
                "distractor_depth_span": self.background.distractor_depth_span,
            },
        }

    @staticmethod
    def from_dict(d):
        bg = d.get("background", {})
        return GeneratorConfig(
            image_size=tuple(d.get("image_size", (480, 360))),
            fx=float(d.get("fx", 620.0)), fy=float(d.get("fy", 620.0)),
            distance_range=tuple(d.get("distance_range", (1.2, 2.5))),
            elevation_range=tuple(d.get("elevation_range", (0.15, 1.05))),
            fg_band=tuple(d.get("fg_band", (0.05, 0.22))),
            max_sample_attempts=int(d.get("max_sample_attempts", 80)),
            background=BackgroundSpec(
                rect_range=tuple(bg.get("rect_range", (2, 7))),
                ellipse_range=tuple(bg.get("ellipse_range", (1, 5))),
                distractor_range=tuple(bg.get("distractor_range", (0, 2))),
                distractor_depth_span=float(bg.get("distractor_depth_span", 1.5)),
            ),
        )


# -- image files -------------------------------------------------------------

def write_ppm(path, image):
    """Binary PPM (P6) from a uint8 [H,W,3] array."""
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def write_pgm(path, mask):
    """Binary PGM (P5) with values 0/255 from a bool [H,W] array."""
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_pnm(path, magic, channels):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(magic):
        raise ValueError(f"{path}: not a {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=pos)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def read_ppm(path):
    return _read_pnm(path, b"P6", 3)


def read_pgm(path):
    return _read_pnm(path, b"P5", 1)


# -- sample generation --------------------------------------------------------

def sample_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def generate_sample(model_name, seed, index, cfg):
    """One accepted sample: rejection loop over (config, camera, render).

    A draw is rejected when the base leaves the frame or the rendered
    foreground fraction falls outside cfg.fg_band; the cheap area estimate
    skips renders that cannot plausibly land inside the band. Note the
    accepted camera distances are therefore not uniform even though each
    draw is.
    """
    model = get_model(model_name)
    rng = sample_rng(seed, index)
    lo, hi = cfg.fg_band
    for _ in range(cfg.max_sample_attempts):
        angles = sample_configuration(model, rng)
        camera, distance = sample_camera(
            rng, model.reach, image_size=cfg.image_size, fx=cfg.fx, fy=cfg.fy,
            distance_range=cfg.distance_range, elevation_range=cfg.elevation_range)
        est = estimate_foreground_fraction(model, angles, camera)
        if est < 1.2 * lo or est > 4.5 * hi:
            continue
        try:
            image, mask = render(model, angles, camera, cfg.background, rng)
        except DegenerateSampleError:
            continue
        frac = float(mask.mean())
        if not lo <= frac <= hi:
            continue
        to_cam = camera.pose.inverse()
        frames = forward_kinematics(model, angles)
        joints_cam = np.array([to_cam.apply(f.translation) for f in frames])
        base_cam = to_cam.apply(np.zeros(3))
        record = {
            "robot": model_name,
            "joint_angles": [float(a) for a in angles],
            "joints_cam": [[float(x) for x in p] for p in joints_cam],
            "base_cam": [float(x) for x in base_cam],
            "camera": {"fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
                       "pose": camera.pose.as_dict()},
            "distance": float(np.linalg.norm(camera.pose.translation)),
            "foreground_fraction": frac,
        }
        return record, image, mask
    raise GenerationError(
        f"{model_name}: sample {index} found no acceptable draw in "
        f"{cfg.max_sample_attempts} attempts")


def _worker(args):
    return generate_sample(*args)


def worker_count():
    try:
        n = int(os.environ.get("ARMSIGHT_THREADS", "1"))
    except ValueError:
        n = 1
    return max(n, 1)


def make_dataset(out_dir, types, n_per_type, seed, cfg=None):
    """Generate n_per_type samples per robot type plus an 80/20 split.

    Writes images/, masks/ and dataset.json under out_dir and returns the
    loaded Dataset. Classes keep catalog order regardless of the order
    given in `types`.
    """
    cfg = cfg or GeneratorConfig()
    if n_per_type < 5:
        raise ValueError(f"n_per_type must be >= 5, got {n_per_type}")
    wanted = set(types)
    for t in wanted:
        get_model(t)  # raises with the catalog listing for unknown names
    classes = [n for n in CANONICAL_ORDER if n in wanted]

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    tasks = []
    for ci, cname in enumerate(classes):
        for k in range(n_per_type):
            tasks.append((cname, seed, ci * n_per_type + k, cfg))

    n_total = len(tasks)
    records = [None] * n_total
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_worker, tasks, chunksize=8)
            for idx, (record, image, mask) in enumerate(results):
                records[idx] = _write_sample(out, idx, record, image, mask, classes)
    else:
        for idx, task in enumerate(tasks):
            record, image, mask = generate_sample(*task)
            records[idx] = _write_sample(out, idx, record, image, mask, classes)

    split_rng = np.random.default_rng(np.random.SeedSequence((seed, _SPLIT_SALT)))
    order = split_rng.permutation(n_total)
    n_train = int(round(TRAIN_FRACTION * n_total))
    train_ids = set(int(i) for i in order[:n_train])
    for idx, rec in enumerate(records):
        rec["split"] = "train" if idx in train_ids else "val"

    manifest = {
        "version": MANIFEST_VERSION,
        "image_size": list(cfg.image_size),
        "classes": classes,
        "seed": int(seed),
        "camera_distance_range": list(cfg.distance_range),
        "generator": cfg.as_dict(),
        "samples": records,
    }
    with open(out / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return Dataset.load(out)


def _write_sample(out, idx, record, image, mask, classes):
    sid = f"{idx:05d}"
    image_rel = f"images/{sid}.ppm"
    mask_rel = f"masks/{sid}.pgm"
    write_ppm(out / image_rel, image)
    write_pgm(out / mask_rel, mask)
    rec = {"id": sid, "image": image_rel, "mask": mask_rel,
           "robot_type": classes.index(record["robot"])}
    rec.update({k: v for k, v in record.items() if k != "robot"})
    return rec


class Dataset:
    """Read-only view over a generated dataset directory."""

    def __init__(self, root, manifest):
        self.root = Path(root)
        self.manifest = manifest

    @staticmethod
    def load(root):
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
        with open(path) as f:
            manifest = json.load(f)
        return Dataset(root, manifest)

    @property
    def classes(self):
        return self.manifest["classes"]

    @property
    def samples(self):
        return self.manifest["samples"]

    @property
    def image_size(self):
        return tuple(self.manifest["image_size"])

    def class_name(self, sample):
        return self.classes[sample["robot_type"]]

    def split_indices(self, split):
        return [i for i, s in enumerate(self.samples) if s["split"] == split]

    def image(self, i):
        return read_ppm(self.root / self.samples[i]["image"])

    def mask(self, i):
        return read_pgm(self.root / self.samples[i]["mask"]) > 0

    def camera(self, i):
        d = dict(self.samples[i]["camera"])
        w, h = self.image_size
        d.setdefault("width", w)
        d.setdefault("height", h)
        return CameraModel.from_dict(d)
