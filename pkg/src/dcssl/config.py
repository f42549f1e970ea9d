"""Flat key=value experiment configuration.

A config file is plain text: one ``key = value`` per line, ``#`` comments,
keys namespaced by dot (train.*, loss.*, model.*, augment.*, data.*). Unknown
keys are rejected so typos cannot silently fall back to defaults. The same
keys can be supplied as command-line overrides; the fully resolved config is
echoed as a banner so every results file is reproducible from its header.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .augment import AugmentPolicy
from .data import Dataset, SemiSplit, load_cifar10, split_semi, synth_blobs
from .numerics import ConfigError, Rng
from .trainer import TrainConfig

__all__ = [
    "SCHEMA",
    "parse_config_file",
    "apply_overrides",
    "effective_config",
    "banner_lines",
    "build_train_config",
    "build_augment_policy",
    "build_datasets",
]


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_float_pair(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) == 1:
        return (parts[0], parts[0])
    if len(parts) == 2:
        return (parts[0], parts[1])
    raise ConfigError(f"expected one or two comma-separated floats, got {text!r}")


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default). Defaults mirror TrainConfig / AugmentPolicy.
SCHEMA: dict = {
    "seed": (int, 0),
    "train.lr0": (float, 0.1),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 1e-4),
    "train.epochs": (int, 100),
    "train.milestones": (_parse_int_tuple, (50, 75)),
    "train.decay_factor": (float, 0.1),
    "train.batch": (int, 128),
    "train.eval_every": (int, 1),
    "train.use_feature_contrast": (_parse_bool, True),
    "train.use_semantic_contrast": (_parse_bool, True),
    "train.record_wall_time": (_parse_bool, False),
    "loss.tau_f": (float, 0.5),
    "loss.tau_s": (float, 0.9),
    "loss.w_ce": (float, 1.0),
    "loss.w_z": (float, 1.0),
    "loss.w_q": (float, 1.0),
    "loss.normalize": (_parse_bool, True),
    "model.hidden": (_parse_int_tuple, (64,)),
    "model.feature_dim": (int, 64),
    "augment.kind": (str, "additive_noise"),
    "augment.turns": (_parse_int_tuple, (0, 1, 2, 3)),
    "augment.sigma": (_parse_float_pair, (0.5, 1.5)),
    "augment.ksize": (int, 3),
    "augment.noise_std": (float, 0.1),
    "data.kind": (str, "blobs"),
    "data.classes": (int, 3),
    "data.per_class": (int, 500),
    "data.test_per_class": (int, 100),
    "data.dim": (int, 8),
    "data.spread": (float, 1.0),
    "data.labels_per_class": (int, 10),
    "data.dir": (str, ""),
    "data.subset": (int, 0),
    "data.test_subset": (int, 0),
}


def parse_config_file(path) -> dict[str, str]:
    """Read raw key=value strings from a config file; later keys win."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        raw[key] = value.strip()
    return raw


def apply_overrides(raw: dict[str, str], overrides: list[str]) -> dict[str, str]:
    """Merge repeatable key=value override strings over the file values."""
    merged = dict(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value.strip()
    return merged


def effective_config(raw: dict[str, str]) -> dict:
    """Typed config: defaults overlaid with the parsed raw strings."""
    effective = {}
    for key, (parser, default) in SCHEMA.items():
        if key in raw:
            try:
                effective[key] = parser(raw[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from exc
        else:
            effective[key] = default
    return effective


def banner_lines(effective: dict) -> list[str]:
    """Canonical one-line-per-key rendering of the full effective config."""
    return [f"{key}={_render(effective[key])}" for key in SCHEMA]


def build_augment_policy(effective: dict) -> AugmentPolicy:
    return AugmentPolicy(
        kind=effective["augment.kind"],
        turns=effective["augment.turns"],
        sigma_range=effective["augment.sigma"],
        ksize=effective["augment.ksize"],
        noise_std=effective["augment.noise_std"],
    )


def build_train_config(effective: dict) -> TrainConfig:
    return TrainConfig(
        lr0=effective["train.lr0"],
        momentum=effective["train.momentum"],
        weight_decay=effective["train.weight_decay"],
        epochs=effective["train.epochs"],
        milestones=effective["train.milestones"],
        decay_factor=effective["train.decay_factor"],
        batch=effective["train.batch"],
        tau_f=effective["loss.tau_f"],
        tau_s=effective["loss.tau_s"],
        w_ce=effective["loss.w_ce"],
        w_z=effective["loss.w_z"],
        w_q=effective["loss.w_q"],
        use_feature_contrast=effective["train.use_feature_contrast"],
        use_semantic_contrast=effective["train.use_semantic_contrast"],
        normalize_contrast=effective["loss.normalize"],
        hidden=effective["model.hidden"],
        feature_dim=effective["model.feature_dim"],
        augment=build_augment_policy(effective),
        seed=effective["seed"],
        eval_every=effective["train.eval_every"],
        record_wall_time=effective["train.record_wall_time"],
    )


def build_datasets(effective: dict) -> tuple[Dataset, Dataset, SemiSplit]:
    """(train, test, semi-split) from the data.* block; fully declarative."""
    seed = effective["seed"]
    kind = effective["data.kind"]
    if kind == "blobs":
        rng = Rng(seed)
        train = synth_blobs(
            rng.substream("data", "train"),
            classes=effective["data.classes"],
            per_class=effective["data.per_class"],
            dim=effective["data.dim"],
            spread=effective["data.spread"],
        )
        test = synth_blobs(
            rng.substream("data", "test"),
            classes=effective["data.classes"],
            per_class=effective["data.test_per_class"],
            dim=effective["data.dim"],
            spread=effective["data.spread"],
        ).with_stats(train)
    elif kind == "cifar10":
        directory = effective["data.dir"]
        if not directory:
            raise ConfigError("data.kind=cifar10 requires data.dir")
        train, test = load_cifar10(directory)
        if effective["data.subset"]:
            train = train.subset(range(min(effective["data.subset"], train.n)))
        if effective["data.test_subset"]:
            test = test.subset(range(min(effective["data.test_subset"], test.n)))
    else:
        raise ConfigError(f"unknown data.kind {kind!r} (expected blobs or cifar10)")

    labels_per_class = effective["data.labels_per_class"]
    if labels_per_class == 0:  # 0 = label everything
        labels_per_class = int(np.bincount(train.y, minlength=train.class_count).min())
    split = split_semi(train, labels_per_class, Rng(seed).substream("split"))
    return train, test, split
