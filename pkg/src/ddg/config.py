"""Run configuration: one YAML/JSON document per experiment.

Every field has a default; unknown keys are rejected; the fully resolved
document is written next to the run's outputs so it can be replayed.
"""
from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field, fields

import yaml

from .errors import ConfigError
from .guidance import GuidanceConfig
from .training import TrainPlan, check_compatible

OUTPUT_ROOT_ENV = "DDG_OUTPUT_ROOT"
_NUMBER = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?")
DATA_SOURCES = ("synthetic", "cifar10")


def parse_number(v):
    """Accept numbers, fraction strings such as ``"8/255"`` and exponent
    strings such as ``"1e-3"`` (which YAML 1.1 leaves as text)."""
    if not isinstance(v, str):
        return v
    text = v.strip()
    if "/" in text:
        num, _, den = text.partition("/")
        if _NUMBER.fullmatch(num.strip()) and _NUMBER.fullmatch(den.strip()):
            if float(den) == 0:
                raise ConfigError(f"division by zero in {v!r}")
            return float(num) / float(den)
        return v
    if _NUMBER.fullmatch(text):
        return float(text)
    return v


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "tiny-cnn"
    normalize: bool = False


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    limit: int | None = None
    test_limit: int | None = None
    num_samples: int = 256
    test_samples: int = 128
    num_classes: int = 10
    image_shape: tuple = (3, 8, 8)
    geometry: str = "gaussian_blobs"
    holdout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.source == "cifar10" and not self.path:
            raise ConfigError(f"data.path is required for source {self.source!r}")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError("data.holdout_fraction must lie in (0, 1)")
        if len(self.image_shape) != 3:
            raise ConfigError("data.image_shape must be [C, H, W]")


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    seed: int = 0
    output_dir: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainPlan = field(default_factory=TrainPlan)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    overrides: tuple = ()

    def __post_init__(self):
        if self.data.source == "cifar10" and self.guidance.num_classes != 10:
            raise ConfigError("CIFAR-10 needs guidance.num_classes = 10")
        if self.data.source == "synthetic" and self.guidance.num_classes != self.data.num_classes:
            raise ConfigError(
                f"guidance.num_classes={self.guidance.num_classes} differs from "
                f"data.num_classes={self.data.num_classes}"
            )
        check_compatible(self.train, self.guidance)

    def run_dir(self) -> str:
        if self.output_dir:
            return self.output_dir
        return os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), self.name)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["overrides"] = list(self.overrides)
        return _plain(d)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


_SECTIONS = {"model": ModelConfig, "data": DataConfig, "train": TrainPlan,
             "guidance": GuidanceConfig}


def _check_type(name, default, v):
    """Scalar fields must keep the kind of their default; whole floats become ints."""
    if isinstance(default, bool):
        if not isinstance(v, bool):
            raise ConfigError(f"{name} must be true or false, got {v!r}")
    elif isinstance(default, int):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
            raise ConfigError(f"{name} must be an integer, got {v!r}")
        return int(v)
    elif isinstance(default, float):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{name} must be a number, got {v!r}")
    return v


def _build(cls, raw, where):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: parse_number(v) for k, v in raw.items()}
    defaults = {f.name: f.default for f in fields(cls)}
    for k, v in kwargs.items():
        kwargs[k] = _check_type(f"{where}.{k}", defaults[k], v)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _set_dotted(doc: dict, key: str, value):
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {p} is not a section")
    node[parts[-1]] = value


def build_config(doc: dict | None, overrides=()) -> RunConfig:
    """Validate a raw document, applying ``key=value`` overrides first."""
    doc = dict(doc or {})
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    applied = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        _set_dotted(doc, key.strip(), yaml.safe_load(raw))
        applied.append(item)
    doc.pop("overrides", None)
    top = {f.name for f in fields(RunConfig)} - {"overrides"}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    kwargs = {k: _build(cls, doc.get(k), k) for k, cls in _SECTIONS.items()}
    if "num_classes" not in (doc.get("guidance") or {}):
        kwargs["guidance"] = dataclasses.replace(
            kwargs["guidance"],
            num_classes=10 if kwargs["data"].source == "cifar10" else kwargs["data"].num_classes,
        )
    for k in ("name", "seed", "output_dir"):
        if k in doc:
            kwargs[k] = doc[k]
    if not isinstance(kwargs.get("seed", 0), int):
        raise ConfigError("seed must be an integer")
    try:
        return RunConfig(overrides=tuple(applied), **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides=()) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return build_config(doc, overrides)


def save_resolved(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
