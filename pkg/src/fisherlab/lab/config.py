"""Experiment configuration: flat ``section.key = value`` files.

Every random stream of a run is derived from a seed plus a fixed stream
label, so switching one feature on or off never shifts another feature's
random numbers. Dataset construction (generation, split, label noise) uses
``data.seed``; everything else (init, shuffling, penalty labels, probes,
mixup) uses ``run.seed``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..regularizers import RegularizerConfig

# Stream labels are part of the reproducibility contract; never renumber.
STREAMS = {
    "init": 1,
    "shuffle": 2,
    "penalty": 3,
    "probe": 4,
    "mixup": 5,
    "data": 6,
    "split": 7,
    "noise": 8,
    "group": 9,
    "branch": 10,
}


def stream_seed(seed: int, label: str, *keys: int) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[label],) + tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelCfg:
    kind: str = "mlp"
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    channels: tuple[int, ...] = (8, 16)
    init: str = "he"
    init_scale: float = 1.0


@dataclass(frozen=True)
class DataCfg:
    source: str = "spirals"  # spirals | gaussians | idx | flds
    classes: int = 2
    per_class: int = 300
    noise: float = 0.0  # spiral angular noise
    turns: float = 1.0
    dim: int = 2
    separation: float = 2.0
    images: str = ""
    labels: str = ""
    path: str = ""
    label_noise: float = 0.0  # fraction of training labels redrawn
    split: tuple[float, ...] = (0.6, 0.2, 0.2)
    seed: int = 0


@dataclass(frozen=True)
class OptimCfg:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple[int, ...] = ()
    gamma: float = 0.5
    batch_size: int = 32
    epochs: int = 100


@dataclass(frozen=True)
class ProbeCfg:
    every: int = 1  # epochs between probe rows; 0 disables epoch probes
    trf_examples: int = 512
    trf_labels: int = 1
    trf_minibatch: bool = True
    hutchinson_m: int = 30  # 0 disables Tr(H)
    hutchinson_examples: int = 256
    hvp_c: float = 1e-4
    empirical_fisher: bool = True
    per_step: bool = False
    step_examples: int = 128
    group_cap: int = 0  # 0 = use every clean/noisy example


@dataclass(frozen=True)
class RunCfg:
    seed: int = 0
    epsilon: float = 0.5
    name: str = "run"


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelCfg = field(default_factory=ModelCfg)
    data: DataCfg = field(default_factory=DataCfg)
    optim: OptimCfg = field(default_factory=OptimCfg)
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    probe: ProbeCfg = field(default_factory=ProbeCfg)
    run: RunCfg = field(default_factory=RunCfg)

    def set(self, key: str, value) -> "ExperimentConfig":
        """Copy with one dotted key replaced; ``value`` may be a string."""
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        sub = getattr(self, section)
        types = {f.name: f for f in fields(sub)}
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _parse_value(value, getattr(sub, name), key)
        try:
            new_sub = replace(sub, **{name: value})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
        return replace(self, **{section: new_sub})

    def update(self, pairs: dict) -> "ExperimentConfig":
        cfg = self
        for key, value in pairs.items():
            cfg = cfg.set(key, value)
        return cfg

    def items(self):
        for section in SECTIONS:
            sub = getattr(self, section)
            for f in fields(sub):
                yield f"{section}.{f.name}", getattr(sub, f.name)

    def dumps(self) -> str:
        return "".join(f"{key} = {_format_value(value)}\n" for key, value in self.items())


SECTIONS = ("model", "data", "optim", "reg", "probe", "run")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            kind = float if key in ("data.split",) else int
            return tuple(kind(part) for part in text.split(","))
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        cfg = cfg.set(key.strip(), value)
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.dumps(), encoding="utf-8")


def parse_assignments(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    return out


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks that single fields cannot express."""
    if cfg.optim.epochs < 1:
        raise ConfigError("optim.epochs must be >= 1")
    if cfg.optim.batch_size < 1:
        raise ConfigError("optim.batch_size must be >= 1")
    if not cfg.optim.lr > 0:
        raise ConfigError("optim.lr must be positive")
    if not 0.0 <= cfg.data.label_noise <= 1.0:
        raise ConfigError("data.label_noise must lie in [0, 1]")
    if cfg.data.source not in ("spirals", "gaussians", "idx", "flds"):
        raise ConfigError(f"unknown data.source {cfg.data.source!r}")
    if cfg.model.kind not in ("linear", "mlp", "conv"):
        raise ConfigError(f"unknown model.kind {cfg.model.kind!r}")
    if cfg.probe.every < 0 or cfg.probe.hutchinson_m < 0:
        raise ConfigError("probe cadence and Hutchinson M must be non-negative")


def as_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
