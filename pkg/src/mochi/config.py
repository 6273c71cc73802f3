"""Run configuration: strict JSON loading, dotted-key overrides, resolution.

Unknown keys anywhere are rejected with :class:`ConfigInvalid` naming the
offending dotted key. ``"mochi": null`` selects the plain momentum-contrast
path with no synthesis code at all.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigInvalid
from .synthesis import Anchor, MochiConfig, Sampling


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "sphere_clusters"
    classes: int = 8
    per_class: int = 250
    input_dim: int = 32
    separation: float = 0.5
    spread: float = 0.15
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("sphere_clusters", "csv"):
            raise ConfigInvalid(f"dataset.kind must be 'sphere_clusters' or 'csv', got {self.kind!r}", "dataset.kind")
        if self.kind == "csv" and not self.path:
            raise ConfigInvalid("dataset.path is required for kind 'csv'", "dataset.path")


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.2
    queue_capacity: int = 1024
    embed_dim: int = 128
    batch_size: int = 64
    epochs: int = 30
    base_lr: float = 0.03
    momentum: float = 0.999
    aug_noise: float = 0.1
    seed: int = 0
    oracle_training: bool = False
    mochi: Optional[MochiConfig] = field(default_factory=MochiConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    output_dir: str = "runs/default"

    def __post_init__(self):
        checks = [
            (self.tau > 0, "tau", "must be positive"),
            (self.queue_capacity > 0, "queue_capacity", "must be positive"),
            (self.embed_dim >= 2, "embed_dim", "must be at least 2"),
            (0 < self.batch_size <= self.queue_capacity, "batch_size", "must be in [1, queue_capacity]"),
            (self.epochs >= 0, "epochs", "must be non-negative"),
            (self.base_lr >= 0, "base_lr", "must be non-negative"),
            (0 <= self.momentum < 1, "momentum", "must be in [0, 1)"),
            (self.aug_noise >= 0, "aug_noise", "must be non-negative"),
            (self.seed >= 0, "seed", "must be non-negative"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigInvalid(f"{key} {msg}", key)
        if self.mochi is not None and self.mochi.n > self.queue_capacity:
            raise ConfigInvalid("mochi.n must not exceed queue_capacity", "mochi.n")


_MOCHI_KEYS = {f.name for f in fields(MochiConfig)}
_DATASET_KEYS = {f.name for f in fields(DatasetConfig)}
_TOP_KEYS = {f.name for f in fields(TrainConfig)}

_FLOATS = {"tau", "base_lr", "momentum", "aug_noise", "mochi.sampling_tau", "dataset.separation", "dataset.spread"}
_BOOLS = {"oracle_training", "mochi.weight_query_mix_logits", "mochi.oracle_synthesis"}
_STRS = {"output_dir", "mochi.ranking_anchor", "mochi.hard_mix_anchor", "mochi.sampling", "dataset.kind", "dataset.path"}
_NULLABLE = {"mochi.sampling_tau", "dataset.path"}


def _check_type(key: str, value: Any) -> Any:
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigInvalid(f"{key} must not be null", key)
    if key in _BOOLS:
        if not isinstance(value, bool):
            raise ConfigInvalid(f"{key} must be a boolean", key)
    elif key in _FLOATS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(f"{key} must be a number", key)
        return float(value)
    elif key in _STRS:
        if not isinstance(value, str):
            raise ConfigInvalid(f"{key} must be a string", key)
    else:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(f"{key} must be an integer", key)
    return value


def _section(raw: Any, allowed: set, prefix: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"{prefix} must be an object", prefix)
    out = {}
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigInvalid(f"unknown config key {prefix}.{key}", f"{prefix}.{key}")
        out[key] = _check_type(f"{prefix}.{key}", value)
    return out


def config_from_dict(raw: dict) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigInvalid("config must be a JSON object")
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in _TOP_KEYS:
            raise ConfigInvalid(f"unknown config key {key}", key)
        if key == "mochi":
            if value is None:
                kwargs["mochi"] = None
                continue
            section = _section(value, _MOCHI_KEYS, "mochi")
            try:
                kwargs["mochi"] = MochiConfig(**section)
            except ValueError as exc:
                raise ConfigInvalid(f"mochi: {exc}", "mochi") from exc
        elif key == "dataset":
            kwargs["dataset"] = DatasetConfig(**_section(value, _DATASET_KEYS, "dataset"))
        else:
            kwargs[key] = _check_type(key, value)
    return TrainConfig(**kwargs)


def config_to_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    if cfg.mochi is not None:
        m = out["mochi"]
        for key in ("ranking_anchor", "hard_mix_anchor", "sampling"):
            m[key] = getattr(cfg.mochi, key).value
    return out


def parse_override(text: str) -> tuple[str, Any]:
    """``key.sub=value``; the value is parsed as JSON, falling back to a string."""
    if "=" not in text:
        raise ConfigInvalid(f"override {text!r} is not key=value", text)
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(raw: dict, overrides) -> dict:
    """Return a copy of ``raw`` with dotted overrides applied.

    Overrides may only name keys of the schema; a key absent from the file
    but part of the schema is allowed and gets added.
    """
    out = json.loads(json.dumps(raw))
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        parts = key.split(".")
        if len(parts) == 1:
            if parts[0] not in _TOP_KEYS:
                raise ConfigInvalid(f"unknown config key {key}", key)
            out[parts[0]] = value
            continue
        if len(parts) != 2 or parts[0] not in ("mochi", "dataset"):
            raise ConfigInvalid(f"unknown config key {key}", key)
        allowed = _MOCHI_KEYS if parts[0] == "mochi" else _DATASET_KEYS
        if parts[1] not in allowed:
            raise ConfigInvalid(f"unknown config key {key}", key)
        section = out.get(parts[0])
        if section is None:
            if parts[0] == "mochi" and "mochi" in out:
                raise ConfigInvalid(f"cannot override {key}: mochi is disabled (null)", key)
            section = out[parts[0]] = {}
        section[parts[1]] = value
    return out


def load_config(path, overrides=()) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(apply_overrides(raw, overrides))


def dump_config(cfg: TrainConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def toy_config(**changes) -> TrainConfig:
    """The default toy benchmark run with MoCHi(64, 16, 16)."""
    base = TrainConfig(
        queue_capacity=1024,
        embed_dim=32,
        batch_size=64,
        epochs=30,
        base_lr=0.5,
        momentum=0.99,
        aug_noise=0.15,
        mochi=MochiConfig(n=64, s=16, s_prime=16, warmup_epochs=3),
        output_dir="runs/toy",
    )
    return replace(base, **changes)


# re-exported for callers building configs by hand
__all__ = [
    "Anchor",
    "DatasetConfig",
    "MochiConfig",
    "Sampling",
    "TrainConfig",
    "apply_overrides",
    "config_from_dict",
    "config_to_dict",
    "dump_config",
    "load_config",
    "toy_config",
]
