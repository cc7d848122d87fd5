"""Run configuration: a JSON document with model, schedule, optimizer,
dataset and sampler sections. Unknown keys are rejected at every level.

Example::

    {
      "model": {"family": "image", "resolution": 16, "widths": [32, 64], ...},
      "schedule": {"kind": "VE"},
      "optimizer": {"lr": 0.001, "batch_size": 32, "steps": 2000, "ema": false},
      "dataset": {"kind": "gaussian_blobs", "size": 2048, "seed": 0},
      "sampler": {"kind": "heun_ode", "steps": 18},
      "seed": 0,
      "output_dir": "runs/toy"
    }

Omitted fields take the dataclass defaults. Large-scale diffusion training
typically runs Adam at 1e-4 to 2e-4 with batches of 256 to 512 and EMA decay
0.9999; the defaults here suit small CPU runs (larger lr, smaller batch).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

from ..diffusion import NoiseSchedule, SamplerConfig
from ..networks import ConfigError, ImageSpaceConfig, LatentConfig, config_from_dict, config_to_dict, toy_image_config
from .datasets import KINDS


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 1000
    ema: bool = False
    ema_decay: float = 0.9999
    grad_clip: Optional[float] = 1.0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    loss_smoothing: float = 0.98

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 1:
            raise ConfigError("optimizer: lr > 0, batch_size >= 1 and steps >= 1 required")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and 0 <= self.ema_decay < 1):
            raise ConfigError("optimizer: beta1, beta2, ema_decay must lie in [0, 1)")
        if not 0 <= self.loss_smoothing < 1:
            raise ConfigError("optimizer: loss_smoothing must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("optimizer: grad_clip must be positive or null")
        if self.checkpoint_every < 0:
            raise ConfigError("optimizer: checkpoint_every must be >= 0")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "gaussian_blobs"
    size: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"dataset: unknown kind {self.kind!r}; expected one of {KINDS}")
        if self.size < 1:
            raise ConfigError("dataset: size must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: Union[ImageSpaceConfig, LatentConfig] = field(default_factory=toy_image_config)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    precision: str = "float32"
    output_dir: str = "runs/default"
    log_wall_time: bool = True

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def image_shape(self) -> tuple:
        m = self.model
        return (m.resolution, m.resolution, m.in_channels if m.family == "image" else m.channels)

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    # -- serialisation
    def to_dict(self) -> dict:
        sampler = asdict(self.sampler)
        if sampler["guidance_mask"] is not None:
            sampler["guidance_mask"] = list(sampler["guidance_mask"])
        return {
            "model": _jsonable(config_to_dict(self.model)),
            "schedule": asdict(self.schedule),
            "optimizer": asdict(self.optimizer),
            "dataset": asdict(self.dataset),
            "sampler": sampler,
            "seed": self.seed,
            "precision": self.precision,
            "output_dir": self.output_dir,
            "log_wall_time": self.log_wall_time,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        _reject_unknown("run config", d, {f.name for f in fields(cls)})
        kw = {k: d[k] for k in ("seed", "precision", "output_dir", "log_wall_time") if k in d}
        if "model" in d:
            try:
                kw["model"] = config_from_dict(d["model"])
            except TypeError as e:
                raise ConfigError(f"model: {e}") from None
        for key, sub in (("schedule", NoiseSchedule), ("optimizer", OptimizerConfig),
                         ("dataset", DatasetConfig), ("sampler", SamplerConfig)):
            if key in d:
                kw[key] = _section(key, sub, d[key])
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        return cls.from_json(text)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _reject_unknown(where: str, d: dict, known: set) -> None:
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _section(name: str, cls, d):
    if not isinstance(d, dict):
        raise ConfigError(f"{name}: expected an object")
    _reject_unknown(name, d, {f.name for f in fields(cls)})
    d = dict(d)
    if cls is SamplerConfig and d.get("guidance_mask") is not None:
        d["guidance_mask"] = tuple(bool(v) for v in d["guidance_mask"])
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None
