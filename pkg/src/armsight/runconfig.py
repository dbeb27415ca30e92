"""One JSON run configuration shared by all CLI commands.

Strict parsing: unknown keys anywhere in the document are rejected, and a
resolved copy of the config lands in every output directory so any run
can be reproduced from its artifacts alone.
"""

import copy
import json

from .dataset import GeneratorConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


def default_config():
    gen = GeneratorConfig().as_dict()
    train = TrainConfig().as_dict()
    train.pop("seed")  # the top-level seed feeds every stage
    return {
        "seed": 0,
        "generator": {**gen, "types": None, "n_per_type": 500},
        "train": train,
        "eval": {"mask_threshold": 0.5, "distance_bin_width": 0.25},
    }


def _merge(base, override, path=""):
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key '{here}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{here}' must be an object")
            _merge(base[key], value, here)
        else:
            base[key] = value
    return base


def load_config(path=None, overrides=None):
    """Defaults, deep-merged with an optional JSON file, then overrides.

    overrides maps dotted paths (e.g. "train.total_iters") to values.
    """
    cfg = copy.deepcopy(default_config())
    if path is not None:
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, doc)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        parts = dotted.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key '{dotted}'")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key '{dotted}'")
        node[parts[-1]] = value
    return cfg


def generator_config(cfg):
    d = {k: v for k, v in cfg["generator"].items() if k not in ("types", "n_per_type")}
    return GeneratorConfig.from_dict(d)


def train_config(cfg):
    return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})


def save_config(path, cfg, command):
    with open(path, "w") as f:
        json.dump({"command": command, "config": cfg}, f, indent=1, sort_keys=True)
        f.write("\n")
