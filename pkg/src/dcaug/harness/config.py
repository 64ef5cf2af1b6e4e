"""Experiment configuration: nested dataclasses read from JSON or YAML.

Every field has a default, so ``{}`` is a valid config. Errors name the
offending field by its dotted path, e.g. ``method.lambdas[1]``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from dcaug.augment import SearchSpace, SpaceVariant, WeakConfig
from dcaug.training import Variant


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


@dataclass
class DatasetConfig:
    path: str | None = None
    domains: int = 4
    classes: int = 5
    side: int = 32
    samples_per_domain: int = 200
    seed: int = 0


@dataclass
class MethodConfig:
    variants: list[str] = field(default_factory=lambda: ["dcaug-label"])
    lambdas: list[float] = field(default_factory=lambda: [0.5])


@dataclass
class WeakSection:
    flip: float = 0.5
    scale: list[float] = field(default_factory=lambda: [0.7, 1.0])
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3

    def build(self) -> WeakConfig:
        return WeakConfig(self.flip, tuple(self.scale), self.brightness, self.contrast, self.saturation)


@dataclass
class ModelSection:
    hidden: int = 64
    beta: float = 0.999


@dataclass
class OptimSection:
    lr: float = 1e-3
    weight_decay: float = 0.0


@dataclass
class AnalyticsSection:
    enabled: bool = False
    clean_steps: int = 500


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    space: str = "wider"
    weak: WeakSection = field(default_factory=WeakSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    steps: int = 2000
    per_domain_batch: int = 8
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    seed: int = 0
    holdouts: list[int] | None = None
    val_fraction: float = 0.2
    checkpoint_every: float = 0.1
    log_selections: bool = True
    analytics: AnalyticsSection = field(default_factory=AnalyticsSection)
    out: str = "runs/default"

    @property
    def variants(self) -> list[Variant]:
        return [Variant.parse(v) for v in self.method.variants]

    def search_space(self, side: int) -> SearchSpace:
        return SearchSpace(SpaceVariant(self.space), side)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data: dict | None) -> ExperimentConfig:
        cfg = _build(cls, data or {}, "")
        validate(cfg)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        text = Path(path).read_text()
        return cls.from_dict(yaml.safe_load(text) or {})


_SCALARS = {"int": int, "float": float, "bool": bool, "str": str}


def _coerce(type_str: str, value: Any, path: str):
    t = type_str.replace(" ", "")
    if t.endswith("|None"):
        if value is None:
            return None
        t = t[: -len("|None")]
    if t.startswith("list["):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        inner = t[len("list[") : -1]
        return [_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    py = _SCALARS[t]
    if py is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(value, bool) or value is None:
        raise ConfigError(path, f"expected {t}, got {value!r}")
    if py is float and isinstance(value, (int, float)):
        return float(value)
    if py is int and isinstance(value, int):
        return value
    if py is str and isinstance(value, str):
        return value
    raise ConfigError(path, f"expected {t}, got {value!r}")


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(_join(path, name), "unknown field")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = _join(path, name)
        if dataclasses.is_dataclass(f.default_factory if f.default_factory is not dataclasses.MISSING else None):
            kwargs[name] = _build(f.default_factory, value, sub)
        else:
            kwargs[name] = _coerce(str(f.type), value, sub)
    return cls(**kwargs)


def _join(path: str, name: str) -> str:
    return f"{path}.{name}" if path else name


def validate(cfg: ExperimentConfig) -> None:
    def check(ok: bool, path: str, message: str):
        if not ok:
            raise ConfigError(path, message)

    ds = cfg.dataset
    if ds.path is None:
        check(ds.domains >= 1, "dataset.domains", "must be >= 1")
        check(ds.classes >= 1, "dataset.classes", "must be >= 1")
        check(ds.side >= 4, "dataset.side", "must be >= 4")
        check(ds.samples_per_domain >= 1, "dataset.samples_per_domain", "must be >= 1")
    check(len(cfg.method.variants) >= 1, "method.variants", "at least one variant")
    for i, v in enumerate(cfg.method.variants):
        try:
            Variant.parse(v)
        except ValueError:
            raise ConfigError(f"method.variants[{i}]", f"unknown variant {v!r}") from None
    check(len(cfg.method.lambdas) >= 1, "method.lambdas", "at least one value")
    for i, lam in enumerate(cfg.method.lambdas):
        check(0.0 <= lam <= 1.0, f"method.lambdas[{i}]", f"must be in [0, 1], got {lam}")
    check(cfg.space in {v.value for v in SpaceVariant}, "space", f"unknown space {cfg.space!r}")
    try:
        cfg.weak.build()
    except ValueError as exc:
        raise ConfigError("weak", str(exc)) from None
    check(cfg.model.hidden >= 1, "model.hidden", "must be >= 1")
    check(0.0 <= cfg.model.beta < 1.0, "model.beta", "must be in [0, 1)")
    check(cfg.optim.lr > 0, "optim.lr", "must be > 0")
    check(cfg.optim.weight_decay >= 0, "optim.weight_decay", "must be >= 0")
    check(cfg.steps > 0, "steps", "must be > 0")
    check(cfg.per_domain_batch >= 1, "per_domain_batch", "must be >= 1")
    check(len(cfg.seeds) >= 1, "seeds", "at least one seed")
    check(0.0 < cfg.val_fraction < 1.0, "val_fraction", "must be in (0, 1)")
    check(0.0 < cfg.checkpoint_every <= 1.0, "checkpoint_every", "must be in (0, 1]")
    check(cfg.analytics.clean_steps > 0, "analytics.clean_steps", "must be > 0")
