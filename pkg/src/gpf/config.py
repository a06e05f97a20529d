"""Run configuration: every module default in one place, overridable from JSON.

A config file is a JSON object with any of the sections below; each section
maps field names to values, e.g. ``{"train": {"iters": 200}, "kernel": {"k": 4}}``.
Unknown sections or fields are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

from .depth import DepthEstimationConfig
from .kernel import KernelConfig
from .sampling import LogSamplingConfig
from .training import FinetuneConfig, TrainConfig


@dataclass(frozen=True)
class RenderConfig:
    sampler: str = "log16"
    chunk: int = 4096
    aggregator: str = "learned"


@dataclass(frozen=True)
class FetchConfig:
    top_k_views: Optional[int] = 3


@dataclass(frozen=True)
class SynthConfig:
    kind: str = "textured_cube"
    n_points: int = 5000
    n_views: int = 8
    resolution: int = 64
    n_held_out: int = 2


@dataclass(frozen=True)
class RunConfig:
    kernel: KernelConfig = field(default_factory=KernelConfig)
    log: LogSamplingConfig = field(default_factory=LogSamplingConfig)
    depth: DepthEstimationConfig = field(default_factory=DepthEstimationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    fetch: FetchConfig = field(default_factory=FetchConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def override(self, overrides: dict) -> "RunConfig":
        if not isinstance(overrides, dict):
            raise ValueError("config overrides must be a JSON object")
        sections = {f.name for f in dataclasses.fields(self)}
        out = {}
        for name, values in overrides.items():
            if name not in sections:
                raise ValueError(f"unknown config section {name!r}; expected one of {sorted(sections)}")
            cur = getattr(self, name)
            allowed = {f.name for f in dataclasses.fields(cur)}
            if not isinstance(values, dict):
                raise ValueError(f"config section {name!r} must be an object")
            bad = set(values) - allowed
            if bad:
                raise ValueError(f"unknown {name} settings {sorted(bad)}; expected some of {sorted(allowed)}")
            out[name] = dataclasses.replace(cur, **values)
        return dataclasses.replace(self, **out)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path) as f:
            cfg = cfg.override(json.load(f))
    if overrides:
        cfg = cfg.override(overrides)
    return cfg
