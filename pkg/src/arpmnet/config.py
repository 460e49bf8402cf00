"""Run configuration: one JSON document, strict schema, one root seed.

Seed splitting: ``SeedSequence(root).spawn(3)`` yields the data, init and
batch-order streams in that order; each child contributes the first 32-bit
word of ``generate_state`` as its integer seed. Explicit per-stream seeds in
the JSON override the derived ones.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import DNetConfig, MRFConfig, SNetConfig
from .data_io import PhantomSpec
from .trainer import StagePlan, default_plans

CONFIG_NAME = "config.json"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SeedConfig:
    root: int = 0
    data: int | None = None
    init: int | None = None
    batch: int | None = None

    def resolved(self) -> "SeedConfig":
        derived = [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(self.root).spawn(3)]
        return SeedConfig(
            self.root,
            derived[0] if self.data is None else self.data,
            derived[1] if self.init is None else self.init,
            derived[2] if self.batch is None else self.batch,
        )


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple[StagePlan, ...] = field(default_factory=lambda: tuple(default_plans()))
    val_fraction: float = 0.2
    precision: str = "float32"
    # run only the adversarial plan, starting from initialisation
    joint_from_scratch: bool = False

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        names = [p.stage for p in self.stages]
        if len(set(names)) != len(names):
            raise ValueError("each stage may appear only once")

    def plan(self, stage: str) -> StagePlan:
        for p in self.stages:
            if p.stage == stage:
                return p
        raise KeyError(stage)


@dataclass(frozen=True)
class RunConfig:
    seeds: SeedConfig = field(default_factory=SeedConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    snet: SNetConfig = field(default_factory=SNetConfig)
    dnet: DNetConfig = field(default_factory=DNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    count: int = 200

    def __post_init__(self):
        if self.dnet.in_channels != self.snet.num_classes:
            raise ValueError("dnet.in_channels must equal snet.num_classes")
        if self.phantom.num_classes != self.snet.num_classes:
            raise ValueError("phantom.num_classes must equal snet.num_classes")
        if self.count < 0:
            raise ValueError("count must be non-negative")

    def resolved(self) -> "RunConfig":
        seeds = self.seeds.resolved()
        return dataclasses.replace(self, seeds=seeds, phantom=dataclasses.replace(self.phantom, seed=seeds.data))

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def echo(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / CONFIG_NAME
        path.write_text(self.dumps())
        return path


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _build(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _build(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}") for k, v in value.items()}
        try:
            return tp(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_build(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_build(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def from_dict(doc: dict) -> RunConfig:
    """Build a config from parsed JSON; missing keys take their defaults."""
    return _build(RunConfig, doc, "config")


def loads(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return from_dict(doc)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


__all__ = ["RunConfig", "SeedConfig", "TrainConfig", "ConfigError", "MRFConfig", "load", "loads", "from_dict"]
