# cch/config.py
"""
Run configuration: one JSON file with sections paths / camera / model / train /
dataset. Every key is optional and defaults to Constants.variables. Unknown
sections or keys raise ConfigError; overrides ("train.steps" -> 10) win over
the file.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional, Tuple

from Constants.variables import (CONFIG_PATH, DATASET_PATH, RIG_PATH, RUNS_DIR, VOCAB_PATH, Dataset,
                                 Disc, Fields, Rays, Rig, Text, Train)
from cch.ray_geometry import Camera
from utils.errors import ConfigError
from utils.persistence import load_json

# ---------------- Sections ---------------- #


@dataclass
class PathsConfig:
    rig: str = RIG_PATH
    vocab: str = VOCAB_PATH
    dataset: str = DATASET_PATH
    out_dir: str = RUNS_DIR
    checkpoint: str = ""  # empty -> <out_dir>/latest.ckpt

    def checkpoint_path(self) -> str:
        return self.checkpoint or os.path.join(self.out_dir, "latest.ckpt")


@dataclass
class CameraConfig:
    position: List[float] = field(default_factory=lambda: list(Rays.POSITION))
    look_at: List[float] = field(default_factory=lambda: list(Rays.LOOK_AT))
    up: List[float] = field(default_factory=lambda: list(Rays.UP))
    focal: float = Rays.FOCAL  # pixels at `height`
    height: int = Rays.HEIGHT
    width: int = Rays.WIDTH

    def build(self, height: Optional[int] = None, width: Optional[int] = None) -> Camera:
        camera = Camera.look_at(self.position, self.look_at, self.up, self.focal, self.height,
                                self.width)
        if height is None:
            return camera
        return camera.resized(height, width)


@dataclass
class ModelConfig:
    samples: int = Rays.SAMPLES
    mixture_m: float = Fields.MIXTURE_M
    mixture_n: int = Fields.MIXTURE_N
    neighbors: int = Rig.NEIGHBORS
    embed_dim: int = Text.EMBED_DIM
    max_tokens: int = Text.MAX_TOKENS
    feature_dim: int = Fields.FEATURE_DIM
    hidden_layers: int = Fields.HIDDEN_LAYERS
    hidden_units: int = Fields.HIDDEN_UNITS
    omega0: float = Fields.OMEGA0
    alpha_init: float = Fields.ALPHA_INIT
    background: List[float] = field(default_factory=lambda: list(Fields.BACKGROUND))
    r1_weight: float = Disc.R1_WEIGHT
    r1_mode: str = Disc.R1_MODE
    disc_widths: List[int] = field(default_factory=lambda: list(Disc.WIDTHS))
    seg_dim: int = Disc.SEG_DIM


@dataclass
class TrainConfig:
    steps: int = Train.STEPS
    batch_size: int = Train.BATCH_SIZE
    height: int = Train.HEIGHT
    width: int = Train.WIDTH
    patch: int = Train.PATCH  # 0 renders whole frames
    lr_g: float = Train.LR_G
    lr_d: float = Train.LR_D
    betas: List[float] = field(default_factory=lambda: list(Train.BETAS))
    checkpoint_every: int = Train.CHECKPOINT_EVERY
    log_every: int = Train.LOG_EVERY
    eikonal_points: int = Train.EIKONAL_POINTS
    recon_weight: float = Train.RECON_WEIGHT
    seed: int = Train.SEED


@dataclass
class DatasetConfig:
    count: int = Dataset.COUNT
    seed: int = Dataset.SEED
    pose_std: float = Dataset.POSE_STD
    root_yaw: float = Dataset.ROOT_YAW
    shape_std: float = Dataset.SHAPE_STD
    grammar: Optional[Dict[str, List[str]]] = None


SECTIONS = {
    "paths": PathsConfig,
    "camera": CameraConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "dataset": DatasetConfig,
}


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("config root must be a JSON object")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        config = cls()
        for name, values in data.items():
            if not isinstance(values, Mapping):
                raise ConfigError(f"config section {name!r} must be an object")
            section = getattr(config, name)
            for key, value in values.items():
                _set(section, name, key, value)
        config.validate()
        return config

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Apply dotted overrides such as {"train.seed": 3}; None values are skipped."""
        config = copy.deepcopy(self)
        for dotted, value in overrides.items():
            if value is None:
                continue
            name, _, key = dotted.partition(".")
            if name not in SECTIONS or not key:
                raise ConfigError(f"unknown override {dotted!r}")
            _set(getattr(config, name), name, key, value)
        config.validate()
        return config

    def validate(self) -> None:
        m, t, c = self.model, self.train, self.camera
        checks: List[Tuple[bool, str]] = [
            (m.samples >= 1, "model.samples must be >= 1"),
            (m.mixture_n > 0 and m.mixture_n % 2 == 0, "model.mixture_n must be positive and even"),
            (m.mixture_m > 0, "model.mixture_m must be > 0"),
            (m.neighbors >= 1, "model.neighbors must be >= 1"),
            (m.alpha_init > 0, "model.alpha_init must be > 0"),
            (m.r1_weight >= 0, "model.r1_weight must be >= 0"),
            (m.r1_mode in ("autograd", "finite_difference"),
             "model.r1_mode must be 'autograd' or 'finite_difference'"),
            (len(m.disc_widths) == 4, "model.disc_widths needs 4 entries"),
            (len(m.background) == 3, "model.background needs 3 entries"),
            (c.focal > 0, "camera.focal must be > 0"),
            (c.height >= 1 and c.width >= 1, "camera resolution must be positive"),
            (t.steps >= 0, "train.steps must be >= 0"),
            (t.batch_size >= 1, "train.batch_size must be >= 1"),
            (t.height >= 1 and t.width >= 1, "train resolution must be positive"),
            (t.patch >= 0, "train.patch must be >= 0"),
            (t.lr_g > 0 and t.lr_d > 0, "learning rates must be > 0"),
            (len(t.betas) == 2 and all(0 <= b < 1 for b in t.betas), "train.betas must be 2 values in [0,1)"),
            (t.checkpoint_every >= 1 and t.log_every >= 1, "checkpoint/log intervals must be >= 1"),
            (self.dataset.count >= 0, "dataset.count must be >= 0"),
            (self.dataset.shape_std == 0, "dataset.shape_std must be 0 (records are drawn from the template body)"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


def _set(section: Any, name: str, key: str, value: Any) -> None:
    known = {f.name: f for f in fields(section)}
    if key not in known:
        raise ConfigError(f"unknown config key {name}.{key}")
    current = getattr(section, key)
    setattr(section, key, _coerce(f"{name}.{key}", current, value))


def _coerce(where: str, current: Any, value: Any) -> Any:
    try:
        if isinstance(current, bool):
            return bool(value)
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, str):
            return str(value)
        if isinstance(current, list):
            kind = type(current[0]) if current else float
            return [kind(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot use {value!r} here") from None
    return value


def load_config(path: Optional[str] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """File (or $CCH_CONFIG, or config.json when present) plus overrides."""
    path = path or os.environ.get("CCH_CONFIG") or (CONFIG_PATH if os.path.exists(CONFIG_PATH)
                                                   else None)
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            data = load_json(path)
        except ValueError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        config = RunConfig.from_dict(data)
    else:
        config = RunConfig()
    return config.with_overrides(overrides or {})
