"""Run configuration: one JSON document, schema-validated, every field defaulted."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import jsonschema

from .errors import ConfigError
from .generator import CascadeConfig
from .imle import TrainConfig
from .metrics import FwvConfig
from .tasks import TaskSpec

ABLATIONS = ("no_hs", "no_mn", "no_is", "no_wn")

# Cumulative removals, in the order of the ablation table.
ABLATION_LADDER = [
    ("full", ()),
    ("-HS", ("no_hs",)),
    ("-HS-MN", ("no_hs", "no_mn")),
    ("-HS-MN-IS", ("no_hs", "no_mn", "no_is")),
    ("-HS-MN-IS-WN", ("no_hs", "no_mn", "no_is", "no_wn")),
]


@dataclass
class DataConfig:
    """Shapes dataset to generate (training split plus held-out split)."""

    size: int = 3000
    heldout: int = 64
    image_size: int = 32
    seed: int = 0


@dataclass
class MetricsConfig:
    sigma_list: list[float] = field(default_factory=lambda: [0.3, 0.2, 0.15])
    samples_per_input: int = 16
    eval_inputs: int = 64
    bench_inputs: int = 10
    bench_trials: int = 10
    bench_m: list[list[int]] = field(default_factory=lambda: [[1, 1, 1, 1], [2, 2, 2, 2], [4, 4, 4, 4]])
    cap_factor: int = 512

    def fwv(self) -> FwvConfig:
        return FwvConfig(list(self.sigma_list), self.samples_per_input)


@dataclass
class PathsConfig:
    dataset: str = "data"
    out: str = "out"


_FIELD_SCHEMAS = {
    "int": {"type": "integer"},
    "float": {"type": "number"},
    "bool": {"type": "boolean"},
    "str": {"type": "string"},
    "list[int]": {"type": "array", "items": {"type": "integer"}},
    "list[float]": {"type": "array", "items": {"type": "number"}},
    "list[list[int]]": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
}


def _field_schema(f) -> dict:
    name = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        return dict(_FIELD_SCHEMAS[name])
    except KeyError:
        raise TypeError(f"no schema mapping for field {f.name}: {name}") from None


def _section_schema(cls) -> dict:
    return {
        "type": "object",
        "additionalProperties": False,
        "properties": {f.name: _field_schema(f) for f in fields(cls)},
    }


SECTIONS = {
    "cascade": CascadeConfig,
    "train": TrainConfig,
    "task": TaskSpec,
    "data": DataConfig,
    "metrics": MetricsConfig,
    "paths": PathsConfig,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "camnet run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {name: _section_schema(cls) for name, cls in SECTIONS.items()},
}
SCHEMA["properties"]["task"]["properties"]["kind"]["enum"] = ["super_resolution", "colourization", "decompression"]


@dataclass
class RunConfig:
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict[str, Any]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, directory: str | Path) -> Path:
        path = Path(directory) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def parse_config(doc: dict[str, Any]) -> RunConfig:
    """Validate against :data:`SCHEMA` and build a fully resolved config.

    The task fixes the channel counts of the cascade: colourisation maps
    one gray channel to RGB, the other tasks map RGB to RGB.
    """
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    doc = copy.deepcopy(doc)
    task = TaskSpec(**doc.get("task", {}))
    cascade_doc = doc.get("cascade", {})
    cascade_doc.setdefault("in_ch", task.in_ch)
    if cascade_doc["in_ch"] != task.in_ch:
        raise ConfigError(f"task {task.kind} needs cascade.in_ch={task.in_ch}")
    cfg = RunConfig(
        cascade=CascadeConfig(**cascade_doc),
        train=TrainConfig(**doc.get("train", {})),
        task=task,
        data=DataConfig(**doc.get("data", {})),
        metrics=MetricsConfig(**doc.get("metrics", {})),
        paths=PathsConfig(**doc.get("paths", {})),
    )
    if cfg.data.image_size != cfg.cascade.resolution(cfg.cascade.K - 1):
        raise ConfigError(f"data.image_size={cfg.data.image_size} but the cascade ends at "
                          f"{cfg.cascade.resolution(cfg.cascade.K - 1)}px")
    if len(cfg.train.m_per_stage) != cfg.cascade.K:
        raise ConfigError(f"train.m_per_stage needs {cfg.cascade.K} entries")
    for m in cfg.metrics.bench_m:
        if len(m) != cfg.cascade.K or min(m) < 1:
            raise ConfigError(f"metrics.bench_m entry {m} must have {cfg.cascade.K} positive entries")
    seed = os.environ.get("CAMNET_SEED")
    if seed is not None:
        try:
            cfg.train.seed = int(seed)
        except ValueError:
            raise ConfigError(f"CAMNET_SEED must be an integer, got {seed!r}") from None
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return parse_config(doc)


def apply_ablations(cfg: RunConfig, flags: list[str] | tuple[str, ...]) -> RunConfig:
    """Switch off components; flags are any of :data:`ABLATIONS`."""
    unknown = set(flags) - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablation flags {sorted(unknown)}; choose from {list(ABLATIONS)}")
    cfg = copy.deepcopy(cfg)
    if "no_hs" in flags:
        cfg.train.hs = False
    if "no_mn" in flags:
        cfg.train.mapping = False
    if "no_is" in flags:
        cfg.train.intermediate_supervision = False
    if "no_wn" in flags:
        cfg.train.weight_norm = False
    return cfg
