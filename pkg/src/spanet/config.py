"""Flat key-value run configuration shared by all commands.

Every tunable default lives here under a dotted key. Configs load from
JSON files, reject unknown keys, serialize canonically (sorted keys), and
hash so outputs can state exactly which settings produced them.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


class ConfigError(Exception):
    """Raised for unknown keys, bad values, or malformed config files."""


DEFAULTS: dict[str, object] = {
    "seed": 0,
    # synthetic data
    "synth.canvas_h": 128,
    "synth.canvas_w": 128,
    "synth.n_min": 8,
    "synth.n_max": 14,
    "synth.radius_min": 4.0,
    "synth.radius_max": 9.0,
    "synth.clump_fraction": 0.3,
    "synth.clump_min_sep": 6.0,
    "synth.texture_noise": 0.04,
    "synth.n_train": 20,
    "synth.n_test": 6,
    # network
    "net.levels": 4,
    "net.stem_channels": 32,
    "net.growth_rate": 68,
    "net.reduce_rate": 0.5,
    "net.repetitions": 4,
    # detection target
    "gt.beta": 0.01,
    "gt.radius": 8.0,
    # training
    "train.patch_size": 256,
    "train.batch_size_segdet": 2,
    "train.batch_size_instance": 4,
    "train.alpha1": 0.01,
    "train.alpha2": 0.0001,
    "train.cycle": 20,
    "train.epochs": 100,
    "train.momentum": 0.9,
    "train.weight_decay": 0.0001,
    "train.augment": True,
    # post-processing
    "post.threshold": 0.3,
    "post.min_area": 5,
    "post.maxima_window": 3,
    "post.maxima_min_dist": 4.0,
    "post.maxima_height": 0.2,
    "post.rbf_gamma": 0.0,        # 0 = per-clump median-distance heuristic
    "post.max_clump_pixels": 2000,
    # evaluation
    "metrics.iou_threshold": 0.5,
}


class RunConfig:
    """Immutable view over DEFAULTS with validated overrides."""

    def __init__(self, overrides: dict[str, object] | None = None):
        values = dict(DEFAULTS)
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, value)
        self._values = values

    def __getitem__(self, key: str):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        merged = {k: v for k, v in self._values.items() if v != DEFAULTS[k]}
        merged.update(overrides)
        return RunConfig(merged)

    def as_dict(self) -> dict[str, object]:
        return dict(self._values)

    def canonical_text(self) -> str:
        return json.dumps(self._values, sort_keys=True, indent=2) + "\n"

    def config_hash(self) -> str:
        packed = json.dumps(self._values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(packed.encode()).hexdigest()[:12]

    def save(self, path) -> None:
        Path(path).write_text(self.canonical_text())

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls(raw)


def _coerce(key: str, value):
    """Check an override's type against the default's; ints may stand in
    for floats, nothing else converts silently."""
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    raise ConfigError(f"{key} has unsupported default type {type(default).__name__}")
