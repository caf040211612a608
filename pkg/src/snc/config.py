"""Declarative run configuration: key = value files with sections.

A config file fully describes an experiment (network shape, training
hyperparameters, datasets, mask layer, kNN settings, outputs) so runs are
reproducible records. Unknown sections or keys are rejected; every command
copies its resolved config into the output directory.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data
from .errors import ConfigurationError
from .model import ActivationKind, LayerSpec, TrainConfig


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_ints(raw: str) -> list[int]:
    return [int(part) for part in raw.split(",") if part.strip()]


def _parse_floats(raw: str) -> list[float]:
    return [float(part) for part in raw.split(",") if part.strip()]


@dataclass
class RunConfig:
    # network
    hidden: list[int] = dataclasses.field(default_factory=lambda: [64])
    activation: str = "relu"
    block_size: int = 0
    dropout_keep: list[float] = dataclasses.field(default_factory=lambda: [1.0])
    input_keep: float = 1.0
    # train
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 100
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    val_fraction: float = 0.1
    # data
    source: str = "blobs"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    standardize: bool = False
    classes: int = 5
    per_class: int = 200
    test_per_class: int = 50
    dim: int = 32
    spread: float = 0.05
    data_seed: int = 0
    # mask
    mask_layer: int = -1
    theta: float | None = None
    # knn
    k: int = 5
    weighting: str = "inverse_distance"
    # flips
    flips_enabled: bool = False
    flips_track: int = 10000
    flips_layer: int | None = None
    # output
    out_dir: str = ""


# (section, key) -> (attribute, converter)
_SCHEMA = {
    ("network", "hidden"): ("hidden", _parse_ints),
    ("network", "activation"): ("activation", lambda s: s.strip().lower()),
    ("network", "block_size"): ("block_size", int),
    ("network", "dropout_keep"): ("dropout_keep", _parse_floats),
    ("network", "input_keep"): ("input_keep", float),
    ("train", "learning_rate"): ("learning_rate", float),
    ("train", "momentum"): ("momentum", float),
    ("train", "batch_size"): ("batch_size", int),
    ("train", "max_epochs"): ("max_epochs", int),
    ("train", "patience"): ("patience", int),
    ("train", "seed"): ("seed", int),
    ("train", "val_fraction"): ("val_fraction", float),
    ("data", "source"): ("source", lambda s: s.strip().lower()),
    ("data", "train_images"): ("train_images", str),
    ("data", "train_labels"): ("train_labels", str),
    ("data", "test_images"): ("test_images", str),
    ("data", "test_labels"): ("test_labels", str),
    ("data", "standardize"): ("standardize", _parse_bool),
    ("data", "classes"): ("classes", int),
    ("data", "per_class"): ("per_class", int),
    ("data", "test_per_class"): ("test_per_class", int),
    ("data", "dim"): ("dim", int),
    ("data", "spread"): ("spread", float),
    ("data", "seed"): ("data_seed", int),
    ("mask", "layer"): ("mask_layer", int),
    ("mask", "theta"): ("theta", float),
    ("knn", "k"): ("k", int),
    ("knn", "weighting"): ("weighting", lambda s: s.strip().lower()),
    ("flips", "enabled"): ("flips_enabled", _parse_bool),
    ("flips", "track"): ("flips_track", int),
    ("flips", "layer"): ("flips_layer", int),
    ("output", "dir"): ("out_dir", str),
}


def load_config(path) -> RunConfig:
    """Parse and validate a config file; unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc

    cfg = RunConfig()
    unknown = []
    for section in parser.sections():
        for key, raw in parser.items(section):
            entry = _SCHEMA.get((section, key))
            if entry is None:
                unknown.append(f"[{section}] {key}")
                continue
            attr, convert = entry
            try:
                setattr(cfg, attr, convert(raw))
            except ValueError as exc:
                raise ConfigurationError(
                    f"bad value for [{section}] {key}: {exc}"
                ) from exc
    if unknown:
        raise ConfigurationError("unknown config keys: " + ", ".join(unknown))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if not cfg.hidden or any(w < 1 for w in cfg.hidden):
        raise ConfigurationError("[network] hidden must list positive layer widths")
    if cfg.activation not in ("relu", "lwta", "maxout", "sigmoid"):
        raise ConfigurationError(f"unknown [network] activation {cfg.activation!r}")
    if cfg.activation in ("lwta", "maxout") and cfg.block_size < 2:
        raise ConfigurationError(
            f"[network] block_size >= 2 is required for {cfg.activation}"
        )
    if len(cfg.dropout_keep) not in (1, len(cfg.hidden)):
        raise ConfigurationError(
            "[network] dropout_keep must be one value or one per hidden layer"
        )
    if cfg.source not in ("idx", "blobs"):
        raise ConfigurationError(f"unknown [data] source {cfg.source!r}")
    if cfg.source == "idx":
        for field_name in ("train_images", "train_labels"):
            if not getattr(cfg, field_name):
                raise ConfigurationError(f"missing [data] {field_name}")
        if bool(cfg.test_images) != bool(cfg.test_labels):
            raise ConfigurationError(
                "[data] test_images and test_labels must be given together"
            )
    if cfg.weighting not in ("uniform", "inverse_distance"):
        raise ConfigurationError(f"unknown [knn] weighting {cfg.weighting!r}")
    if cfg.k < 1:
        raise ConfigurationError("[knn] k must be positive")


def activation_kind(cfg: RunConfig) -> ActivationKind:
    if cfg.activation in ("lwta", "maxout"):
        return ActivationKind(cfg.activation, cfg.block_size)
    return ActivationKind(cfg.activation)


def layer_specs(cfg: RunConfig, input_dim: int) -> list[LayerSpec]:
    """Hidden-layer specs for the configured widths, chaining maxout pooling."""
    kind = activation_kind(cfg)
    keeps = (
        cfg.dropout_keep
        if len(cfg.dropout_keep) == len(cfg.hidden)
        else cfg.dropout_keep * len(cfg.hidden)
    )
    specs = []
    prev = input_dim
    for width, keep in zip(cfg.hidden, keeps):
        spec = LayerSpec(prev, width, kind, dropout_keep_prob=keep)
        specs.append(spec)
        prev = spec.output_dim
    return specs


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        rng_seed=cfg.seed,
        early_stop_patience=cfg.patience,
        input_keep_prob=cfg.input_keep,
    )


def load_datasets(cfg: RunConfig) -> tuple[data.Dataset, data.Dataset | None]:
    """Materialize the configured (train, test) pair.

    With standardize on, train-set statistics are applied to both splits.
    Blob datasets draw shared class centers, then carve the test rows off
    with a stratified split so counts per class are exact.
    """
    if cfg.source == "idx":
        train = data.load_idx(cfg.train_images, cfg.train_labels)
        test = None
        if cfg.test_images:
            test = data.load_idx(
                cfg.test_images, cfg.test_labels, class_count=train.class_count
            )
        if cfg.standardize:
            mean = train.features.mean(axis=0)
            std = max(float(train.features.std()), 1e-12)
            train = replace(train, features=(train.features - mean) / std)
            if test is not None:
                test = replace(test, features=(test.features - mean) / std)
        return train, test
    total = cfg.per_class + cfg.test_per_class
    blob = data.synthetic_blobs(cfg.classes, total, cfg.dim, cfg.spread, cfg.data_seed)
    if cfg.test_per_class == 0:
        return blob, None
    return data.split(blob, cfg.test_per_class / total, seed=cfg.data_seed + 1)


def resolved_text(cfg: RunConfig) -> str:
    """Render the fully resolved configuration back to config-file syntax."""
    parser = configparser.ConfigParser(interpolation=None)
    for (section, key), (attr, _convert) in _SCHEMA.items():
        value = getattr(cfg, attr)
        if value is None:
            continue
        if isinstance(value, list):
            rendered = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        else:
            rendered = str(value)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, rendered)
    out = []
    for section in parser.sections():
        out.append(f"[{section}]")
        for key, value in parser.items(section):
            out.append(f"{key} = {value}")
        out.append("")
    return "\n".join(out)
