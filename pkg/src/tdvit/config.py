"""Run configuration shared by every command.

A YAML file may hold any of these top-level sections::

    seed: 0
    mode: reuse            # reuse | refresh
    out: results.jsonl
    model:   {...}         # ModelConfig fields; overrides the command's base model
    synth:   {...}         # GenParams fields
    train:   {...}         # TrainSettings fields
    bench:   {...}         # BenchSettings fields

Unknown keys anywhere are rejected. Command-line flags override file values.
"""
from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Any, Mapping

import yaml

from tdvit.backbone import ModelConfig, toy_config
from tdvit.errors import ConfigError
from tdvit.memory import SamplingStrategy
from tdvit.synthtask import GenParams, synth_model_config

MODES = {"reuse": "reuse", "refresh": "refresh_each_step"}


@dataclasses.dataclass(frozen=True)
class TrainSettings:
    steps: int = 200
    lr: float = 1e-3
    batch_size: int = 8
    n_train: int | None = None  # default: fresh videos for every step
    n_test: int = 80
    seeds: int = 5
    min_delta: float = 0.05  # occluded-accuracy margin the comparison reports against

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.n_test < 1 or self.seeds < 1:
            raise ConfigError("steps, batch_size, n_test and seeds must be positive")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


@dataclasses.dataclass(frozen=True)
class BenchSettings:
    frames: int = 64
    seeds: int = 1
    tolerance: float = 1e-12

    def __post_init__(self):
        if self.frames < 1 or self.seeds < 1:
            raise ConfigError("frames and seeds must be positive")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "reuse"
    out: str | None = None
    model: Mapping[str, Any] = dataclasses.field(default_factory=dict)
    synth: GenParams = GenParams()
    train: TrainSettings = TrainSettings()
    bench: BenchSettings = BenchSettings()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")

    @property
    def stream_mode(self) -> str:
        return MODES[self.mode]

    def toy_model(self) -> ModelConfig:
        """Base for gradcheck, trf and bench: toy-T with the file's model overrides."""
        return toy_config(**{"seed": self.seed, **self.model})

    def synth_model(self) -> ModelConfig:
        return synth_model_config(**{"seed": self.seed, **self.model})

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "mode": self.mode,
            "out": self.out,
            "model": _plain(dict(self.model)),
            "synth": _plain(dataclasses.asdict(self.synth)),
            "train": dataclasses.asdict(self.train),
            "bench": dataclasses.asdict(self.bench),
        }


def _plain(obj):
    if isinstance(obj, SamplingStrategy):
        return dataclasses.asdict(obj)
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _check_keys(section: str, data: Mapping, allowed) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(map(str, unknown))}")


def _field_names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _tuples(data: Mapping) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}


def model_overrides(data: Mapping) -> dict:
    _check_keys("model", data, _field_names(ModelConfig))
    out = _tuples(data)
    sampling = out.get("sampling")
    if isinstance(sampling, str):
        out["sampling"] = SamplingStrategy(sampling)
    elif isinstance(sampling, Mapping):
        _check_keys("model.sampling", sampling, _field_names(SamplingStrategy))
        out["sampling"] = SamplingStrategy(**sampling)
    ModelConfig(**out)  # validate eagerly so errors point at the file
    return out


def from_dict(data: Mapping | None) -> RunConfig:
    data = dict(data or {})
    _check_keys("config", data, _field_names(RunConfig))
    try:
        synth = GenParams(**_tuples(_section(data, "synth", GenParams)))
        synth.validate()
        return RunConfig(
            seed=int(data.get("seed", 0)),
            mode=data.get("mode", "reuse"),
            out=data.get("out"),
            model=model_overrides(data.get("model") or {}),
            synth=synth,
            train=TrainSettings(**_section(data, "train", TrainSettings)),
            bench=BenchSettings(**_section(data, "bench", BenchSettings)),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _section(data: Mapping, name: str, cls) -> dict:
    section = data.get(name) or {}
    _check_keys(name, section, _field_names(cls))
    return dict(section)


def load(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    with p.open() as fh:
        return from_dict(yaml.safe_load(fh))


def apply_overrides(cfg: RunConfig, *, seed: int | None = None, mode: str | None = None, out: str | None = None,
                    variant: str | None = None, toy_scale: float | None = None) -> RunConfig:
    """Command-line flags win over file values."""
    model = dict(cfg.model)
    if variant is not None:
        model["variant"] = variant
    if toy_scale is not None:
        if toy_scale != int(toy_scale) or toy_scale < 1:
            raise ConfigError(f"--toy-scale must be a whole number >= 1, got {toy_scale}")
        model["toy_scale"] = int(toy_scale)
    changes: dict[str, Any] = {"model": model_overrides(model)}
    if seed is not None:
        changes["seed"] = seed
    if mode is not None:
        changes["mode"] = mode
    if out is not None:
        changes["out"] = out
    return dataclasses.replace(cfg, **changes)


def worker_count(requested: int) -> int:
    """Workers for fan-out, capped by ``TDVIT_THREADS`` (default 1)."""
    raw = os.environ.get("TDVIT_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"TDVIT_THREADS must be an integer, got {raw!r}") from exc
    return max(1, min(cap, requested))
