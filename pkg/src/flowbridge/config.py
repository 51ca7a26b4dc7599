"""Experiment configuration: a YAML file with dataset / architecture / trainer / penalty / output sections."""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import yaml

from . import datasets
from .penalty import PenaltyConfig
from .transforms import Architecture


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(problems))


def derive_seed(seed: int, *tags: str | int) -> int:
    """Stable child seed for a named role (data-x, init-y, shuffle, ...)."""
    words = [int(seed)] + [t if isinstance(t, int) else zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class DataConfig:
    x: str = "checkerboard"
    y: str | None = None
    mode: str | None = None
    cmin: float | None = None
    cmax: float | None = None
    n_eval: int = 10_000
    # conditions used for evaluation transfers in conditional runs (default cmin -> cmax)
    eval_cx: float | None = None
    eval_cy: float | None = None

    @property
    def target(self) -> str:
        return self.y or self.x

    @property
    def conditional(self) -> bool:
        return self.mode is not None

    def resolved_range(self) -> tuple[float, float]:
        lo, hi = datasets.DEFAULT_RANGES[self.mode]
        return (lo if self.cmin is None else float(self.cmin), hi if self.cmax is None else float(self.cmax))

    def condition_scale(self) -> float:
        if not self.conditional:
            return 1.0
        lo, hi = self.resolved_range()
        return max(abs(lo), abs(hi)) or 1.0


@dataclass
class ArchConfig:
    preset: str = "standard"
    hidden: int | None = None
    blocks: int | None = None
    layers: int | None = None
    bins: int | None = None
    tail_bound: float | None = None

    def build(self, context: int = 0) -> Architecture:
        over = {k: v for k, v in dataclasses.asdict(self).items() if k != "preset" and v is not None}
        return Architecture.preset(self.preset, context=context, **over)


@dataclass
class TrainConfig:
    batch_size: int = 128
    initial_lr: float = 1e-4
    epochs: int | None = None
    grad_clip: float = 5.0
    n_train: int = 100_000
    seed: int = 0
    log_every: int = 50
    threads: int = 1


@dataclass
class OutputConfig:
    dir: str = "runs"
    base_x: str | None = None
    base_y: str | None = None
    shared_base: bool = False
    results: str | None = None


@dataclass
class ExperimentConfig:
    dataset: DataConfig = field(default_factory=DataConfig)
    architecture: ArchConfig = field(default_factory=ArchConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


SECTIONS = {
    "dataset": DataConfig,
    "architecture": ArchConfig,
    "trainer": TrainConfig,
    "penalty": PenaltyConfig,
    "output": OutputConfig,
}


def _validate(cfg: ExperimentConfig) -> list[str]:
    bad = []
    d, t, a = cfg.dataset, cfg.trainer, cfg.architecture
    for key, name in (("dataset.x", d.x), ("dataset.y", d.y)):
        if name is not None and name not in datasets.NAMES:
            bad.append(f"{key}: unknown dataset {name!r}")
    if d.mode is not None:
        if d.mode not in datasets.MODES:
            bad.append(f"dataset.mode: unknown mode {d.mode!r}")
        else:
            lo, hi = d.resolved_range()
            if lo > hi:
                bad.append("dataset.cmin: exceeds dataset.cmax")
    if d.n_eval <= 0:
        bad.append("dataset.n_eval: must be positive")
    for key in ("batch_size", "n_train", "log_every", "threads"):
        if getattr(t, key) <= 0:
            bad.append(f"trainer.{key}: must be positive")
    if not t.initial_lr > 0:
        bad.append("trainer.initial_lr: must be positive")
    if not t.grad_clip > 0:
        bad.append("trainer.grad_clip: must be positive")
    if t.epochs is not None and t.epochs < 1:
        bad.append("trainer.epochs: must be at least 1")
    if a.preset not in ("standard", "bigger"):
        bad.append(f"architecture.preset: unknown preset {a.preset!r}")
    for key in ("hidden", "blocks", "layers", "bins"):
        v = getattr(a, key)
        if v is not None and v < 1:
            bad.append(f"architecture.{key}: must be positive")
    if a.tail_bound is not None and not a.tail_bound > 0:
        bad.append("architecture.tail_bound: must be positive")
    if not cfg.penalty.l1_weight >= 0:
        bad.append("penalty.l1_weight: must be non-negative")
    return bad


def from_dict(raw: dict[str, Any] | None) -> ExperimentConfig:
    raw = raw or {}
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping of sections"])
    for key in raw:
        if key not in SECTIONS:
            problems.append(f"{key}: unknown section")
    built = {}
    for name, cls in SECTIONS.items():
        section = raw.get(name) or {}
        if not isinstance(section, dict):
            problems.append(f"{name}: expected a mapping")
            continue
        known = {f.name for f in dataclasses.fields(cls)}
        for key in section:
            if key not in known:
                problems.append(f"{name}.{key}: unknown key")
        try:
            built[name] = cls(**{k: v for k, v in section.items() if k in known})
        except (TypeError, ValueError) as exc:
            problems.append(f"{name}: {exc}")
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(**built)
    problems = _validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load(path: str) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
    return from_dict(raw)


def dump(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
