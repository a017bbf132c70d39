"""Run configuration: one JSON document drives every pipeline stage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .dataset import DatasetConfig
from .errors import DuetError
from .maskgen import GenConfig
from .training import OptimConfig
from .vqvae import HierVQConfig


@dataclass
class RefinerConfig:
    width: int = 256
    blocks: int = 3


@dataclass
class ExtractorConfig:
    latent: int = 64
    width: int = 96


@dataclass
class TransformerConfig:
    width: int = 256
    layers: int = 4
    heads: int = 4
    music_width: int = 128


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    deterministic: bool = False
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    vq: HierVQConfig = field(default_factory=HierVQConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    optim_vq: OptimConfig = field(default_factory=lambda: OptimConfig(
        lr=1e-3, batch_size=8, epochs=60))
    optim_masked: OptimConfig = field(default_factory=lambda: OptimConfig(
        lr=3e-4, batch_size=32, epochs=150))
    optim_refiner: OptimConfig = field(default_factory=lambda: OptimConfig(
        lr=3e-4, batch_size=8, epochs=25))
    optim_extractor: OptimConfig = field(default_factory=lambda: OptimConfig(
        lr=1e-3, batch_size=16, epochs=40))

    def to_json(self) -> str:
        doc = asdict(self)
        doc["dataset"]["bpm_palette"] = list(doc["dataset"]["bpm_palette"])
        doc["dataset"]["interaction_range"] = list(doc["dataset"]["interaction_range"])
        return json.dumps(doc, indent=1, sort_keys=True)


_NESTED = {
    "dataset": DatasetConfig,
    "vq": HierVQConfig,
    "gen": GenConfig,
    "refiner": RefinerConfig,
    "extractor": ExtractorConfig,
    "transformer": TransformerConfig,
    "optim_vq": OptimConfig,
    "optim_masked": OptimConfig,
    "optim_refiner": OptimConfig,
    "optim_extractor": OptimConfig,
}


def _build(cls, doc: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise DuetError("bad-config", f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(doc)
    if cls is DatasetConfig:
        for key in ("bpm_palette", "interaction_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def config_from_dict(doc: dict) -> RunConfig:
    kwargs = {}
    for key, value in doc.items():
        if key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value)
        elif key in {f.name for f in fields(RunConfig)}:
            kwargs[key] = value
        else:
            raise DuetError("bad-config", f"unknown config key: {key}")
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise DuetError("missing-config", f"no config file at {path}")
    except json.JSONDecodeError as exc:
        raise DuetError("bad-config", f"invalid JSON in {path}: {exc}")
    return config_from_dict(doc)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        f.write(cfg.to_json())


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:16]
