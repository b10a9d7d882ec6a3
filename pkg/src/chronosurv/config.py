"""Flat ``namespace.key = value`` run configuration.

A config file is plain text, one assignment per line, ``#`` starts a comment::

    cohort.n = 200
    cohort.beta = 2.0
    model.input_pool = 8
    loss.lambda = 1
    train.epochs = 10

Unknown namespaces or keys are rejected with :class:`InvalidConfigError`
naming the offending key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidConfigError


@dataclass
class CohortConfig:
    n: int = 200
    dims: tuple = (40, 32, 96)  # (nx, ny, nz) voxels
    spacing_mm: tuple = (2.04, 2.04, 3.0)
    max_lesions: int = 5
    lesion_rate: float = 1.0  # Poisson mean of satellite lesions
    high_burden_fraction: float = 0.5
    beta: float = 2.0
    beta_age: float = 0.0
    base_rate: float = 1.0 / 1200.0  # per day
    censor_min_days: int = 90
    censor_max_days: int = 1825
    scan_window_days: int = 365
    t_missing: float = 0.1
    n_missing: float = 0.1


@dataclass
class ArchConfig:
    encoder: str = "conv"  # "conv" (image) or "dense" (tabular)
    in_channels: int = 12
    conv_widths: tuple = (16, 32, 64)
    input_pool: int = 1
    n_features: int = 15
    dense_hidden: int = 64
    embed_dim: int = 64
    time_hidden: int = 32
    cls_hidden: int = 32
    use_time: bool = True


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidConfigError(f"loss.alpha must lie in (0, 1], got {self.alpha}", "loss.alpha")
        if self.gamma < 0:
            raise InvalidConfigError(f"loss.gamma must be >= 0, got {self.gamma}", "loss.gamma")
        if self.lam < 0:
            raise InvalidConfigError(f"loss.lambda must be >= 0, got {self.lam}", "loss.lambda")


@dataclass
class SamplingConfig:
    alive_points: int = 6
    deceased_points: int = 12
    horizon_days: int = 1825
    grid_step: int = 30


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16  # patients per optimizer step
    k_folds: int = 5
    lr_factor: float = 5.0
    lr_patience: int = 5
    augment: bool = True
    cox_lr: float = 0.01
    cox_steps: int = 5000
    cox_hidden: int = 0


@dataclass
class RunConfig:
    cohort: CohortConfig = field(default_factory=CohortConfig)
    model: ArchConfig = field(default_factory=ArchConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    name: str = "run"


NAMESPACES = ("cohort", "model", "loss", "sampling", "train")
_ALIASES = {("loss", "lambda"): "lam"}
_REVERSE_ALIASES = {(ns, attr): key for (ns, key), attr in _ALIASES.items()}


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            as_float = float(raw)
            if as_float != int(as_float):
                raise ValueError(raw)
            return int(as_float)
        if isinstance(default, float):
            if "/" in raw:
                num, den = raw.split("/", 1)
                return float(num) / float(den)
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.strip("()[] ").split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p.strip()) for p in parts)
        return raw
    except ValueError as exc:
        raise InvalidConfigError(f"bad value for {key}: {raw!r}", key) from exc


def apply_overrides(cfg: RunConfig, pairs: dict) -> RunConfig:
    """Return a copy of ``cfg`` with ``{"ns.key": "value"}`` assignments applied."""
    sections = {ns: dataclasses.asdict(getattr(cfg, ns)) for ns in NAMESPACES}
    top = {"seed": cfg.seed, "name": cfg.name}
    for key, raw in pairs.items():
        if key in top:
            top[key] = _coerce(str(raw), top[key], key)
            continue
        ns, _, name = key.partition(".")
        if ns not in sections or not name:
            raise InvalidConfigError(f"unknown config key: {key}", key)
        attr = _ALIASES.get((ns, name), name)
        if attr not in sections[ns] or ((ns, attr) in _REVERSE_ALIASES and name == attr):
            raise InvalidConfigError(f"unknown config key: {key}", key)
        sections[ns][attr] = _coerce(str(raw), sections[ns][attr], key)
    classes = {"cohort": CohortConfig, "model": ArchConfig, "loss": LossConfig,
               "sampling": SamplingConfig, "train": TrainConfig}
    built = {ns: classes[ns](**sections[ns]) for ns in NAMESPACES}
    return RunConfig(**built, seed=top["seed"], name=top["name"])


def parse_config_text(text: str) -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"line {lineno}: expected key = value", None)
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if path is None:
        return cfg
    return apply_overrides(cfg, parse_config_text(Path(path).read_text()))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg: RunConfig) -> str:
    lines = [f"name = {cfg.name}", f"seed = {cfg.seed}"]
    for ns in NAMESPACES:
        for attr, value in dataclasses.asdict(getattr(cfg, ns)).items():
            key = _REVERSE_ALIASES.get((ns, attr), attr)
            lines.append(f"{ns}.{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def desk_config(**overrides) -> RunConfig:
    """Small-scale settings used by the end-to-end synthetic checks.

    The full-scale defaults (100 epochs, lr 1e-4, full-resolution input) are too
    slow for a laptop numpy run; this trades resolution and epochs for speed.
    """
    pairs = {
        "model.input_pool": "8",
        "train.epochs": "10",
        "train.lr": "3e-3",
        "train.batch_size": "8",
        "train.k_folds": "2",
    }
    pairs.update({k: str(v) for k, v in overrides.items()})
    return apply_overrides(RunConfig(), pairs)
