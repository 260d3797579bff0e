"""Run configuration: one JSON document with a schema version, strictly validated."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import ModelConfig
from .diffusion import GuidanceConfig, TrainConfig
from .errors import ConfigError
from .synthscene import CameraSampler, SceneConfig

SCHEMA_VERSION = 1
MODEL_PRESETS = {"overfit": ModelConfig.overfit_scale, "reference": ModelConfig.reference_scale, "default": ModelConfig}


@dataclass
class DataConfig:
    n_views: int = 4
    depth_resolution: tuple = (16, 16)  # (width, height)
    depth_dropout: float = 0.0
    normalize: bool = True


@dataclass
class ScheduleConfig:
    T: int = 200
    kind: str = "cosine"


def _section(cls, d, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    out = {}
    for f in fields(cls):
        if f.name in d:
            v = d[f.name]
            out[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**out)
    except TypeError as exc:
        raise ConfigError(f"bad section '{name}': {exc}") from exc


def _plain(obj) -> dict:
    return json.loads(json.dumps(asdict(obj)))


@dataclass
class RunConfig:
    """Everything needed to regenerate data, train and sample reproducibly."""

    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: CameraSampler = field(default_factory=CameraSampler)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "data": _plain(self.data),
            "scene": _plain(self.scene),
            "camera": _plain(self.camera),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "schedule": _plain(self.schedule),
            "guidance": self.guidance.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {d.get('schema_version')!r}; expected {SCHEMA_VERSION}")
        sections = {"data", "scene", "camera", "model", "train", "schedule", "guidance"}
        unknown = set(d) - sections - {"schema_version"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        model_d = dict(d.get("model") or {})
        preset = model_d.pop("preset", "default")
        if preset not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}; choose from {sorted(MODEL_PRESETS)}")
        base = MODEL_PRESETS[preset]().to_dict()
        base.update(model_d)
        try:
            model = ModelConfig.from_dict(base)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc
        cfg = cls(
            data=_section(DataConfig, d.get("data"), "data"),
            scene=_section(SceneConfig, d.get("scene"), "scene"),
            camera=_section(CameraSampler, d.get("camera"), "camera"),
            model=model,
            train=TrainConfig.from_dict(d.get("train") or {}),
            schedule=_section(ScheduleConfig, d.get("schedule"), "schedule"),
            guidance=GuidanceConfig.from_dict(d["guidance"]) if "guidance" in d else GuidanceConfig(),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.data.n_views < 1:
            raise ConfigError("data.n_views must be >= 1")
        if self.schedule.kind not in ("cosine", "linear"):
            raise ConfigError(f"schedule.kind must be cosine or linear, got {self.schedule.kind!r}")
        h, w = self.model.resolutions["rgb"]
        if tuple(self.camera.resolution) != (w, h):
            raise ConfigError(f"camera.resolution {tuple(self.camera.resolution)} must match model rgb resolution {(w, h)}")
        dh, dw = self.model.resolutions["depth"]
        if tuple(self.data.depth_resolution) != (dw, dh):
            raise ConfigError(
                f"data.depth_resolution {tuple(self.data.depth_resolution)} must match model depth resolution {(dw, dh)}"
            )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(d)


def write_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
