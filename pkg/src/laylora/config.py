"""Run configuration: one nested YAML/JSON document, unknown keys rejected."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigurationError


@dataclass
class ModelSection:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    max_seq: int = 48


@dataclass
class PretrainSection:
    copy_samples: int = 400
    steps: int = 300
    lr: float = 1e-2
    batch_size: int = 16
    seed: int = 0


@dataclass
class DataSection:
    train: str | None = None
    test: str | None = None
    samples_per_style: int = 60
    split_ratio: float = 0.8


@dataclass
class AttachSection:
    rank: int = 4
    scheme: str = "magical"
    mode: str = "switch"
    patterns: list[str] = field(default_factory=lambda: ["q", "v", "up", "down"])
    layers: list[int] | None = None
    router_scope: str = "global"
    styles: list[str] | None = None
    semantic_site: str = "q"


@dataclass
class TrainSection:
    batch_size: int = 16
    lr: float = 1e-2
    epochs: int = 10
    steps: int | None = None
    lam: float = 0.5
    tau: float = 0.5
    warmup_ratio: float = 0.1
    weight_decay: float = 0.0


@dataclass
class ProbeSection:
    k: int | None = None
    n_steps: int = 200
    learning_rate: float = 0.1
    negatives_per_positive: int = 1


@dataclass
class EvaluateSection:
    max_new: int = 32


@dataclass
class SweepSection:
    axis: str = "recommender_accuracy"
    values: list[Any] = field(default_factory=lambda: [1.0, 0.8, 0.6])


@dataclass
class RunConfig:
    seed: int = 0
    out: str | None = None
    recommender: str = "oracle"
    backbone: str | None = None
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    data: DataSection = field(default_factory=DataSection)
    attach: AttachSection = field(default_factory=AttachSection)
    train: TrainSection = field(default_factory=TrainSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where or 'config'} must be a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config key(s) {unknown} in {where or 'top level'}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(raw: dict | None, base_dir: Path | None = None) -> RunConfig:
    cfg = _build(RunConfig, raw or {}, "")
    base = base_dir or Path.cwd()
    for label, value in (("data.train", cfg.data.train), ("data.test", cfg.data.test), ("backbone", cfg.backbone)):
        if value is not None:
            p = Path(value)
            if not p.is_absolute():
                p = base / p
            if not p.exists():
                raise ConfigurationError(f"{label} path {value!r} does not exist")
            if label == "data.train":
                cfg.data.train = str(p)
            elif label == "data.test":
                cfg.data.test = str(p)
            else:
                cfg.backbone = str(p)
    if (cfg.data.train is None) != (cfg.data.test is None):
        raise ConfigurationError("give both data.train and data.test, or neither (synthetic corpus)")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    """Read a ``.yaml``/``.yml``/``.json`` document; relative paths resolve against its folder."""
    if path is None:
        return from_dict({})
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    text = p.read_text(encoding="utf-8")
    raw = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    return from_dict(raw or {}, p.parent)
