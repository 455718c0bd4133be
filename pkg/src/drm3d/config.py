"""Run configuration: one JSON document, nested by section, every field defaulted.

Scene defaults follow the simulation table used for the dataset (4 stations,
40-80 UAVs at 5-10 m/s, 30-45 dBm transmit power, 3-7 dB noise figure,
100 MHz bandwidth) on a coarsened 31.25 m voxel grid covering the same 500 x 500 x 250 m volume.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class SceneConfig:
    grid_dims: tuple = (16, 16, 8)
    voxel_size_m: float = 31.25
    num_stations: int = 4
    station_layout: str = "random"  # "random" per scene, or "grid" (same lattice in every scene)
    station_height_m: float = 25.0
    antenna_streams: int = 8
    uav_count: tuple = (40, 80)
    uav_speed_mps: tuple = (5.0, 10.0)
    uav_altitude_m: tuple = (20.0, 250.0)
    power_budget_dbm: tuple = (30.0, 45.0)
    noise_figure_db: tuple = (3.0, 7.0)
    bandwidth_hz: float = 100e6
    ref_gain_db: float = -30.0
    pathloss_exponent: float = 2.5
    alpha: float = 1.0
    shadowing_db: float = 0.0
    shadowing_corr_m: float = 60.0
    meas_sigma_db: float = 1.0
    dt_s: float = 1.0
    target_rx_dbm: float = -52.0
    power_smoothing: float = 0.5
    power_slew_db: float = 3.0
    power_range_dbm: tuple = (30.0, 45.0)
    sin_amplitude_db: float = 6.0
    sin_period_frames: tuple = (16.0, 32.0)


@dataclass
class DatasetConfig:
    num_sequences: int = 24
    num_frames: int = 100
    train_fraction: float = 0.75
    n_in: int = 15
    n_out: int = 5
    train_stride: int = 1
    test_stride: int = 0  # 0 means n_out (non-overlapping test targets)


@dataclass
class ModelConfig:
    d_model: int = 128
    num_heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 2
    ffn_mult: int = 4
    head_hidden: int = 256
    patch_side: int = 4
    fourier_bands: int = 6
    horizon: int = 5
    n_in: int = 15
    max_tokens: int = 2048
    gamma: float = 1.0
    beta: float = 0.1
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def validate(self):
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        for name in ("d_model", "num_heads", "patch_side", "fourier_bands", "horizon", "n_in", "max_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        return self


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    cosine: bool = True
    warmup_steps: int = 0
    scheduled_sampling: float = 0.5
    checkpoint_every: int = 5
    max_windows: int = 0  # 0 = all training windows
    divergence_threshold: float = 1e6  # normalized-unit loss above this counts as diverged
    seed: int = 0


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 7
    threads: int = 0

    def validate(self) -> "RunConfig":
        s = self.scene
        for name in ("uav_count", "uav_speed_mps", "uav_altitude_m", "power_budget_dbm", "noise_figure_db",
                     "power_range_dbm", "sin_period_frames"):
            lo, hi = getattr(s, name)
            if lo > hi:
                raise ConfigError(f"scene.{name}: min {lo} > max {hi}")
        if s.station_layout not in ("random", "grid"):
            raise ConfigError(f"scene.station_layout must be 'random' or 'grid', got {s.station_layout!r}")
        if s.uav_count[0] < 1 or s.num_stations < 1 or s.antenna_streams < 1:
            raise ConfigError("need at least one station, one UAV and one stream per station")
        if len(s.grid_dims) != 3 or min(s.grid_dims) < 1 or s.voxel_size_m <= 0:
            raise ConfigError(f"invalid grid {s.grid_dims} x {s.voxel_size_m} m")
        top = s.grid_dims[2] * s.voxel_size_m
        if s.uav_altitude_m[0] < 0 or s.uav_altitude_m[1] > top:
            raise ConfigError(f"scene.uav_altitude_m {s.uav_altitude_m} outside grid height [0, {top}]")
        if s.uav_speed_mps[0] <= 0 or s.pathloss_exponent <= 0 or s.alpha < 0 or s.meas_sigma_db < 0:
            raise ConfigError("speeds and path-loss exponent must be positive, alpha and sigma non-negative")
        if not 0 <= s.power_smoothing < 1:
            raise ConfigError("scene.power_smoothing must lie in [0, 1)")
        d = self.dataset
        if d.num_sequences < 0 or d.num_frames < 1 or d.n_in < 1 or d.n_out < 1:
            raise ConfigError("dataset counts must be positive")
        if not 0 < d.train_fraction <= 1:
            raise ConfigError("dataset.train_fraction must lie in (0, 1]")
        if d.train_stride < 1 or d.test_stride < 0:
            raise ConfigError("window strides must be positive")
        self.model.validate()
        if self.train.epochs < 0 or self.train.batch_size < 1 or self.train.lr <= 0:
            raise ConfigError("train.epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0 <= self.train.scheduled_sampling <= 1:
            raise ConfigError("train.scheduled_sampling must be a probability")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {"scene": SceneConfig, "dataset": DatasetConfig, "model": ModelConfig, "train": TrainConfig}


def _coerce(cls, name: str, value: Any):
    f = {f.name: f for f in fields(cls)}.get(name)
    if f is None:
        raise ConfigError(f"unknown config field {cls.__name__}.{name}")
    default = f.default if f.default is not dataclasses.MISSING else None
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{name} expects {len(default)} values, got {value!r}")
        return tuple(type(d)(v) for d, v in zip(default, value))
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
        raise ConfigError(f"{name} expects a number, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if float(value) != int(value):
            raise ConfigError(f"{name} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in data.items():
        if key in SECTIONS:
            section = getattr(cfg, key)
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            for name, v in value.items():
                setattr(section, name, _coerce(SECTIONS[key], name, v))
        elif key in ("seed", "threads"):
            setattr(cfg, key, int(value))
        else:
            raise ConfigError(f"unknown config section {key!r}")
    return cfg.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply ``{"section.field": value}`` overrides; values may be JSON strings."""
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass
        if "." in dotted:
            section, name = dotted.split(".", 1)
            data[section][name] = value
        else:
            data[dotted] = value
    return from_dict(data)


def override_fields():
    """All ``(dotted_name, default)`` pairs that can be overridden from the command line."""
    out = [("seed", RunConfig.seed), ("threads", RunConfig.threads)]
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            out.append((f"{section}.{f.name}", f.default))
    return out
