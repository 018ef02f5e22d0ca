"""Flat ``key=value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment.  Unknown keys are an
error so typos do not silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, Optional

from .errors import InvalidInputError
from .mf import TrainConfig
from .propensity import KINDS
from .synthetic import SyntheticParams
from .tritrain import TriConfig

DATASETS = ("movielens", "yahoo", "coat", "synthetic")
METHODS = ("mf_naive", "mf_ips", "mf_ips_at")


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"
    movielens_path: str = ""
    yahoo_train: str = ""
    yahoo_test: str = ""
    coat_train: str = ""
    coat_test: str = ""
    synthetic_m: int = 10
    synthetic_n: int = 10
    synthetic_rank: int = 3
    synthetic_skew: float = 1.0
    synthetic_corr: float = 1.0
    synthetic_p_min: float = 0.05
    synthetic_p_max: float = 1.0
    synthetic_seed: int = 0
    min_items: int = 1
    test_fraction: float = 0.5
    validation_fraction: float = 0.1
    data_seed: int = 0
    # model
    propensity: str = "uniform"
    propensity_smoothing: bool = False
    clamp_floor: float = 0.0
    method: str = "mf_ips"
    learning_rate: float = 0.01
    batch_size: int = 1024
    l2: float = 1e-4
    dim: int = 10
    epochs: int = 300
    patience: int = 5
    init_scale: float = 1.0
    # tri-training
    epsilon: float = 0.1
    n_iterations: int = 10
    n_steps: int = 10
    dprime_fraction: float = 1.0
    trace_loss: str = "absolute"
    # protocol
    n_seeds: int = 20
    base_seed: int = 0
    ndcg_gain: str = "exp"
    sweep_budget: int = 50
    sweep_seed: int = 0
    sweep_metric: str = "naive"
    # bound verification
    n_trials: int = 100
    delta_conf: float = 0.05
    hypothesis_count: int = 10
    # rq1
    rq1_min_items: str = "1,2,5,10,20,50"
    output_dir: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dataset not in DATASETS:
            raise InvalidInputError(f"dataset must be one of {', '.join(DATASETS)}")
        if self.propensity not in KINDS:
            raise InvalidInputError(f"unknown propensity kind {self.propensity!r}; choose from {', '.join(KINDS)}")
        if self.method not in METHODS:
            raise InvalidInputError(f"method must be one of {', '.join(METHODS)}")
        if self.n_seeds < 1:
            raise InvalidInputError("n_seeds must be positive")
        if self.sweep_budget < 1:
            raise InvalidInputError("sweep_budget must be at least 1")
        if self.sweep_metric not in ("naive", "ips"):
            raise InvalidInputError("sweep_metric must be naive or ips")
        if self.ndcg_gain not in ("exp", "linear"):
            raise InvalidInputError("ndcg_gain must be exp or linear")
        if self.clamp_floor < 0 or self.clamp_floor > 1:
            raise InvalidInputError("clamp_floor must lie in [0, 1] (0 disables)")
        # range checks of the nested configs
        self.train_config(0)
        self.tri_config(0)
        if self.dataset == "synthetic":
            self.synthetic_params()

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        values = dict(learning_rate=self.learning_rate, batch_size=self.batch_size, l2=self.l2,
                      dim=self.dim, epochs=self.epochs, patience=self.patience,
                      init_scale=self.init_scale, seed=seed)
        values.update(overrides)
        return TrainConfig(**values)

    def tri_config(self, seed: int, **overrides) -> TriConfig:
        values = dict(epsilon=self.epsilon, n_iterations=self.n_iterations, n_steps=self.n_steps,
                      dprime_fraction=self.dprime_fraction, trace_loss=self.trace_loss, seed=seed)
        values.update(overrides)
        return TriConfig(**values)

    def synthetic_params(self) -> SyntheticParams:
        return SyntheticParams(m=self.synthetic_m, n=self.synthetic_n, rank=self.synthetic_rank,
                               skew=self.synthetic_skew, corr=self.synthetic_corr,
                               p_min=self.synthetic_p_min, p_max=self.synthetic_p_max)

    def min_items_grid(self):
        return [int(x) for x in self.rq1_min_items.split(",") if x.strip()]

    def to_text(self, exclude=()) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self)
                       if f.name not in exclude)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool or kind == "bool":
            lowered = raw.lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("1", "true", "yes")
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise InvalidInputError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_pairs(lines: Iterable[str], source="config") -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Config from an optional file plus ``key=value`` overrides (applied last)."""
    pairs = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"{p}: config file not found")
        pairs.update(parse_pairs(p.read_text(encoding="utf-8").splitlines(), str(p)))
    pairs.update(parse_pairs(overrides, "--set"))
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    unknown = sorted(set(pairs) - set(types))
    if unknown:
        raise InvalidInputError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v, types[k]) for k, v in pairs.items()}
    return ExperimentConfig(**values)
