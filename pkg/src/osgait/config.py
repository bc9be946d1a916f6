"""JSON experiment configuration with strict key checking and a content digest."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    recordings: str | None = None   # directory of .mmgt files; None means synthesize
    stride: int = 5
    center_velocity: bool = True


@dataclass
class SynthSection:
    M: int = 10
    seed: int = 0
    separability: float = 0.8
    duration_s: float = 24.0
    frame_rate_hz: float = 10.0
    modalities: tuple[int, ...] = (0, 1, 2)


@dataclass
class DetectorSection:
    k: int = 6


@dataclass
class EvalSection:
    ks: tuple[int, ...] = (1, 2, 4, 6)
    unknown_count: int = 3
    trials: int = 3
    split_by_chunk: bool = False
    modality: int | None = None
    points: tuple[int, ...] = ()     # non-empty: retrain at each N_p


def _desk_model() -> ModelConfig:
    return ModelConfig(N_p=32, N_f=10, scale_factor=1 / 8, min_width=32, dtype="float32")


def _desk_train() -> TrainConfig:
    return TrainConfig(learning_rate=1e-3, epochs=12)


@dataclass
class ExperimentConfig:
    seed: int = 0
    ablation: str = "none"
    deterministic: bool = False
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    model: ModelConfig = field(default_factory=_desk_model)
    train: TrainConfig = field(default_factory=_desk_train)
    detector: DetectorSection = field(default_factory=DetectorSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def resolved_model(self) -> ModelConfig:
        return self.model.with_ablation(self.ablation)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def log_resolved(self):
        log.info("resolved config (digest %s): %s", self.digest, json.dumps(self.to_dict(), sort_keys=True))


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where or 'config'}; allowed: {sorted(names)}")
    kwargs = {}
    for key, val in d.items():
        typ = hints[key]
        path = f"{where}.{key}" if where else key
        if dataclasses.is_dataclass(typ):
            base = dataclasses.asdict(_default_of(cls, key))
            kwargs[key] = _build(typ, {**base, **val} if isinstance(val, dict) else val, path)
        else:
            kwargs[key] = _coerce(val, typ, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _default_of(cls, key):
    f = next(f for f in dataclasses.fields(cls) if f.name == key)
    return f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default


def _coerce(val, typ, path):
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        if val is None and type(None) in typing.get_args(typ):
            return None
        inner = [a for a in typing.get_args(typ) if a is not type(None)]
        return _coerce(val, inner[0], path)
    if origin is tuple:
        if not isinstance(val, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(_coerce(v, typing.get_args(typ)[0], path) for v in val)
    if typ is bool:
        if not isinstance(val, bool):
            raise ConfigError(f"{path}: expected true/false")
        return val
    if typ is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{path}: expected an integer")
        return val
    if typ is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(val)
    if typ is str:
        if not isinstance(val, str):
            raise ConfigError(f"{path}: expected a string")
        return val
    return val
