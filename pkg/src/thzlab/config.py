"""Strict JSON run configuration.

Every section is a dataclass; loading rejects unknown keys and wrong
types before any work starts. ``RunConfig.from_dict(cfg.to_dict())``
round-trips exactly.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .physics import PAPER_BANDS_THZ, PHANTOM_KINDS


class ConfigError(ValueError):
    pass


@dataclass
class PhantomSpec:
    kind: str = "procedural-seeded"
    size: int = 32
    n: float = 1.55
    alpha: float = 0.05

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ConfigError(f"phantom kind {self.kind!r} not in {PHANTOM_KINDS}")
        if self.size < 8:
            raise ConfigError("phantom size must be >= 8")


@dataclass
class SimConfig:
    bands_thz: list = field(default_factory=lambda: list(PAPER_BANDS_THZ))
    psf_k: float = 0.5
    snr_db: float = 20.0
    water_lines: dict = field(default_factory=dict)
    angles: int = 30
    step_deg: float = 6.0
    flip_augment: bool = True


@dataclass
class DatasetConfig:
    families: list = field(default_factory=lambda: list(PHANTOM_KINDS))
    held_out: str = "blob-composite"
    n_train: int = 200
    n_val: int = 24
    n_test: int = 48
    size: int = 32

    def __post_init__(self):
        bad = [f for f in self.families if f not in PHANTOM_KINDS]
        if bad or self.held_out not in self.families or len(self.families) < 2:
            raise ConfigError(f"bad family list {self.families} / held_out {self.held_out!r}")


@dataclass
class TrainSection:
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-4
    decay: float = 0.1
    decay_every: int = 300


@dataclass
class TomoConfig:
    method: str = "fbp"
    window: str = "none"
    sart_iters: int = 10
    sart_relax: float = 0.25

    def __post_init__(self):
        if self.method not in ("fbp", "sart") or self.window not in ("none", "hann"):
            raise ConfigError(f"bad tomography settings {self.method!r}/{self.window!r}")


@dataclass
class RunConfig:
    seed: int | None = None
    out_dir: str = "runs/default"
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    train: TrainSection = field(default_factory=TrainSection)
    tomo: TomoConfig = field(default_factory=TomoConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d)


_SCALARS = {int: (int,), float: (int, float), str: (str,), bool: (bool,)}


def _check(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return value
        tp = next(a for a in args if a is not type(None))
        origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin in (list, tuple) or tp in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return value if tp is list or origin is list else tuple(value)
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return value
    ok = _SCALARS.get(tp)
    if ok is not None:
        if isinstance(value, bool) and tp is not bool or not isinstance(value, ok):
            raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
        return float(value) if tp is float else value
    return value


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kw = {k: _check(hints[k], v, f"{where}.{k}" if where else k) for k, v in d.items()}
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON, else as strings."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = node[p]
        node[parts[-1]] = val
    return d


def json_schema() -> dict:
    """JSON schema of :class:`RunConfig` (closed objects, no extra keys)."""
    def sch(tp):
        origin = typing.get_origin(tp)
        if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
            return {"anyOf": [sch(a) for a in typing.get_args(tp)]}
        if tp is type(None):
            return {"type": "null"}
        if dataclasses.is_dataclass(tp):
            hints = typing.get_type_hints(tp)
            return {"type": "object", "additionalProperties": False,
                    "properties": {f.name: sch(hints[f.name]) for f in dataclasses.fields(tp)}}
        if origin in (list, tuple) or tp in (list, tuple):
            return {"type": "array"}
        return {int: {"type": "integer"}, float: {"type": "number"}, str: {"type": "string"},
                bool: {"type": "boolean"}, dict: {"type": "object"}}[tp]
    return {"$schema": "https://json-schema.org/draft/2020-12/schema", "title": "RunConfig", **sch(RunConfig)}
