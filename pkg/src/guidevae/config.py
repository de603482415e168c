"""Pipeline configuration: one YAML document, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dataset import FleetSpec
from .embedding import LdaConfig
from .evaluation import IsConfig
from .model import ModelSpec, NetworkShape, OutputConstraints, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    csv: str | None = None
    min_days: int = 1
    fleet: FleetSpec | None = None

    def __post_init__(self):
        if (self.csv is None) == (self.fleet is None):
            raise ConfigError("data needs exactly one of 'csv' or 'fleet'")


@dataclass
class ZplnConfig:
    h_zero: float = -3.0
    h_plus: float = 1.0


@dataclass
class AmputationConfig:
    a: float = 0.85
    b: float = 10.0
    n: int | None = 365  # null: each user's own profile count


@dataclass
class SplitConfig:
    ratios: list[float] = field(default_factory=lambda: [8.0, 2.0, 2.0])


@dataclass
class EmbeddingConfig:
    W: int = 1000
    K: int = 100  # 0 disables user conditioning
    lda: LdaConfig = field(default_factory=LdaConfig)


@dataclass
class ModelConfig:
    V: int = 100
    eps: float = 1e-4
    xi: float = 1e-2
    hidden_layers: int = 3
    hidden_width: int = 1000
    mean_low: float = -3.0
    mean_high: float = 5.0
    posterior_std_min: float = 0.5

    def spec(self, T: int, K: int) -> ModelSpec:
        return ModelSpec(
            T=T,
            K=K,
            V=self.V,
            shape=NetworkShape(self.hidden_layers, self.hidden_width),
            constraints=OutputConstraints(self.mean_low, self.mean_high, self.posterior_std_min, self.xi, self.eps),
        )


@dataclass
class PipelineConfig:
    data: DataConfig
    seed: int = 0
    out: str = "runs/default"
    zpln: ZplnConfig = field(default_factory=ZplnConfig)
    amputation: AmputationConfig = field(default_factory=AmputationConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: IsConfig = field(default_factory=IsConfig)

    @property
    def guided(self) -> bool:
        return self.embedding.K > 0 and self.embedding.W > 0

    def stage_seed(self, stage: str) -> int:
        key = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "little")
        return int(np.random.SeedSequence([self.seed, key]).generate_state(1)[0])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def stage_hash(self, stage: str) -> str:
        d = self.to_dict()
        payload = {k: d[k] for k in STAGE_KEYS[stage]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "PipelineConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"model.V": 0})``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown key {path}")
            node[leaf] = value
        return from_dict(d)


STAGE_KEYS = {
    "prepare": ["seed", "data", "zpln", "amputation", "split"],
}
STAGE_KEYS["embed"] = STAGE_KEYS["prepare"] + ["embedding"]
STAGE_KEYS["train"] = STAGE_KEYS["embed"] + ["model", "train"]
STAGE_KEYS["eval"] = STAGE_KEYS["train"] + ["evaluation"]


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _coerce(hint, value, where):
    if value is None:
        return None
    target = hint
    if typing.get_origin(hint) in (typing.Union, types.UnionType):
        target = next(a for a in typing.get_args(hint) if a is not type(None))
    if dataclasses.is_dataclass(target):
        return _build(target, value, where)
    if typing.get_origin(target) is list:
        (item,) = typing.get_args(target) or (object,)
        if dataclasses.is_dataclass(item):
            return [_build(item, v, f"{where}[{i}]") for i, v in enumerate(value)]
        return list(value)
    return value


def from_dict(d: dict) -> PipelineConfig:
    if "data" not in d:
        raise ConfigError("config: 'data' section is required")
    return _build(PipelineConfig, d, "config")


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    return from_dict(yaml.safe_load(path.read_text()) or {})


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
