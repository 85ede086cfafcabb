"""Run configuration: one YAML file per run, merged over defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .augment import AugmentationSpec
from .data import load_folder, split_dataset, synthetic_images
from .errors import InvalidInputError
from .inversion import InversionConfig
from .training import ModelSpec, TrainingConfig

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "out": "runs/default",
    "dataset": {
        "source": "synthetic",
        "path": None,
        "n_images": 2000,
        "image_shape": [3, 32, 32],
        "split": [0.9, 0.1],
        "generator_seed": 0,
    },
    "model": {
        "kind": "continuous",
        "latent_channels": 4,
        "widths": [16, 32],
        "codebook_size": 128,
        "embedding_dim": 16,
        "latent_dim": 16,
        "exact": True,
    },
    "training": {
        "epochs": 30,
        "batch_size": 64,
        "learning_rate": 0.002,
        "kl_weight": 0.0001,
        "commitment_weight": 0.25,
        "target_mse": 0.01,
    },
    "inversion": {
        "init_mode": "encoder",
        "learning_rate": 0.01,
        "max_steps": None,
        "stop_rule": "fixed",
        "patience": 5,
    },
    "calibration": {"n": 100, "alpha": 0.05, "source": "pool", "pool_seed": 2000},
    "evaluation": {
        "inspected_checkpoint": None,
        "other_checkpoint": None,
        "other_seed": None,
        "n_belonging": 200,
        "n_other": 200,
        "pool_seed": 1000,
        "compare_random": True,
        "compare_stopping": True,
        "efficiency_samples": 50,
        "robustness": [],
    },
}


class ConfigError(InvalidInputError):
    """Configuration problem, reported with the offending line when known."""


def _key_lines(node, prefix=()):
    """Map dotted key paths to 1-based line numbers from a composed YAML node."""
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (str(key_node.value),)
            lines[".".join(path)] = key_node.start_mark.line + 1
            lines.update(_key_lines(value_node, path))
    return lines


def _merge(base, override, lines, prefix=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            where = f" (line {lines[path]})" if path in lines else ""
            raise ConfigError(f"unknown config key '{path}'{where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                where = f" (line {lines[path]})" if path in lines else ""
                raise ConfigError(f"config key '{path}' must be a mapping{where}")
            out[key] = _merge(base[key], value, lines, f"{path}.")
        else:
            out[key] = value
    return out


def load_config(path=None, text: str | None = None) -> dict:
    """Parse a YAML config and merge it over :data:`DEFAULTS`."""
    if text is None:
        if path is None:
            return copy.deepcopy(DEFAULTS)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    name = str(path) if path is not None else "<config>"
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{name}: YAML parse error{where}: {problem}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: top level must be a mapping")
    try:
        return _merge(DEFAULTS, raw, _key_lines(node))
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def model_spec(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    try:
        return ModelSpec(image_shape=tuple(cfg["dataset"]["image_shape"]), **m)
    except TypeError as exc:
        raise ConfigError(f"bad model section: {exc}") from exc


def training_config(cfg: dict, seed: int | None = None) -> TrainingConfig:
    t = cfg["training"]
    return TrainingConfig(seed=int(cfg["seed"] if seed is None else seed), **t)


def inversion_config(cfg: dict) -> InversionConfig:
    return InversionConfig(seed=int(cfg["seed"]), **cfg["inversion"])


def robustness_specs(cfg: dict) -> list:
    specs = []
    for i, item in enumerate(cfg["evaluation"]["robustness"] or []):
        if not isinstance(item, dict) or set(item) != {"kind", "parameter"}:
            raise ConfigError(f"evaluation.robustness[{i}] needs exactly 'kind' and 'parameter'")
        specs.append(AugmentationSpec(item["kind"], item["parameter"]))
    return specs


@dataclass
class DatasetSplits:
    train: np.ndarray
    heldout: np.ndarray


def load_dataset(cfg: dict) -> DatasetSplits:
    d = cfg["dataset"]
    shape = tuple(int(v) for v in d["image_shape"])
    if d["source"] == "synthetic":
        images = synthetic_images(int(d["n_images"]), int(d["generator_seed"]), shape)
    elif d["source"] == "folder":
        if not d.get("path"):
            raise ConfigError("dataset.path is required for a folder dataset")
        images = load_folder(d["path"], shape)
    else:
        raise ConfigError(f"dataset.source must be 'synthetic' or 'folder', got {d['source']!r}")
    split = list(d["split"])
    if len(split) != 2:
        raise ConfigError("dataset.split must list [train, heldout] fractions")
    train, heldout = split_dataset(images, split, int(d["generator_seed"]))
    if len(train) == 0:
        raise ConfigError("dataset split leaves no training images")
    return DatasetSplits(train=train, heldout=heldout)
