"""Matrix factorization with user, item and global biases.

A rating is predicted as ``theta_u . beta_i + b_u + b_i + b``.  Training
minimizes a (possibly weighted) mean pointwise loss plus
``l2 * (|theta|^2 + |beta|^2 + |b_user|^2 + |b_item|^2)`` with mini-batch
Adam; the global bias is not regularized.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import kernels
from .core import (
    RATING_MAX,
    RATING_MIN,
    DenseRatingMatrix,
    PseudoLabeledSet,
    RatingDataset,
    fsum,
)
from .errors import (
    DivisionHazardError,
    EmptyDataError,
    InvalidInputError,
    MemoryGuardError,
    ParseError,
    TrainingDivergedError,
)

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
DEFAULT_MATRIX_LIMIT = 50_000_000
_LOSS_CODES = {"squared": kernels.SQUARED, "absolute": kernels.ABSOLUTE}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 1024
    l2: float = 1e-4
    dim: int = 10
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience: int = 5
    loss: str = "squared"
    init_scale: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be a positive integer")
        if not (1e-6 <= self.l2 <= 1.0):
            raise InvalidInputError(f"l2={self.l2} outside [1e-6, 1]")
        if self.dim < 1:
            raise InvalidInputError("dim must be at least 1")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise InvalidInputError("invalid Adam moment settings")
        if self.patience < 0:
            raise InvalidInputError("patience must be non-negative")
        if self.loss not in _LOSS_CODES:
            raise InvalidInputError(f"unknown training loss {self.loss!r}")


class FactorModel:
    """Immutable biased factor model over an ``m x n`` grid."""

    def __init__(self, m: int, n: int, d: int, params: np.ndarray, fitted: bool = False):
        size = (m + n) * (d + 1) + 1
        params = np.array(params, dtype=np.float64).ravel()
        if params.shape != (size,):
            raise InvalidInputError(f"expected {size} parameters for m={m}, n={n}, d={d}")
        if not np.all(np.isfinite(params)):
            raise InvalidInputError("model parameters must be finite")
        params.setflags(write=False)
        self.m, self.n, self.d = int(m), int(n), int(d)
        self.params = params
        self.fitted = fitted
        self.theta, self.beta, self.b_user, self.b_item, bg = kernels.unpack(params, m, n, d)
        self.b_global = float(bg[0])

    @classmethod
    def from_blocks(cls, theta, beta, b_user, b_item, b_global, fitted=True) -> "FactorModel":
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        beta = np.atleast_2d(np.asarray(beta, dtype=np.float64))
        m, d = theta.shape
        n = beta.shape[0]
        if beta.shape[1] != d:
            raise InvalidInputError("theta and beta must share the latent dimension")
        flat = np.concatenate([theta.ravel(), beta.ravel(), np.ravel(b_user), np.ravel(b_item), [b_global]])
        return cls(m, n, d, flat, fitted=fitted)

    @classmethod
    def zeros(cls, m, n, d) -> "FactorModel":
        return cls(m, n, d, np.zeros((m + n) * (d + 1) + 1))

    def __repr__(self):
        return f"FactorModel(m={self.m}, n={self.n}, d={self.d}, fitted={self.fitted})"

    def __eq__(self, other):
        if not isinstance(other, FactorModel):
            return NotImplemented
        return (self.m, self.n, self.d) == (other.m, other.n, other.d) and np.array_equal(self.params, other.params)

    __hash__ = None

    def predict_pairs(self, users, items, backend=None) -> np.ndarray:
        users = np.ascontiguousarray(users, dtype=np.int64)
        items = np.ascontiguousarray(items, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.m):
            raise InvalidInputError(f"user index out of range [0, {self.m})")
        if items.size and (items.min() < 0 or items.max() >= self.n):
            raise InvalidInputError(f"item index out of range [0, {self.n})")
        shape = users.shape
        out = kernels.get(backend).predict_pairs(self.params, self.m, self.n, self.d, users.ravel(), items.ravel())
        return np.asarray(out).reshape(shape)

    def predict(self, u: int, i: int) -> float:
        return float(self.predict_pairs(np.array([u]), np.array([i]))[0])

    def save(self, path, config: Optional[TrainConfig] = None) -> None:
        """Text checkpoint: a JSON header line, then one block per parameter group.

        Floats are written with ``repr`` so a reload is bit-exact and equal
        models produce byte-identical files.
        """
        header = {"m": self.m, "n": self.n, "d": self.d, "fitted": self.fitted,
                  "config": asdict(config) if config is not None else None}
        lines = [json.dumps(header, sort_keys=True)]
        for name, block in (("theta", self.theta), ("beta", self.beta),
                            ("b_user", self.b_user), ("b_item", self.b_item),
                            ("b_global", np.array([self.b_global]))):
            flat = np.ravel(block).tolist()
            lines.append(f"{name} {len(flat)}")
            lines.append(" ".join(repr(x) for x in flat))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> Tuple["FactorModel", Optional[TrainConfig]]:
        text = Path(path).read_text(encoding="utf-8").splitlines()
        try:
            header = json.loads(text[0])
            blocks = []
            for k in range(5):
                name, count = text[1 + 2 * k].split()
                values = [float(x) for x in text[2 + 2 * k].split()]
                if len(values) != int(count):
                    raise ParseError(f"block {name} has {len(values)} values, expected {count}", path)
                blocks.append(values)
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"malformed checkpoint ({exc})", path) from exc
        flat = np.concatenate([np.asarray(b, dtype=np.float64) for b in blocks])
        model = cls(header["m"], header["n"], header["d"], flat, fitted=header["fitted"])
        config = TrainConfig(**header["config"]) if header.get("config") else None
        return model, config


def init(m: int, n: int, config: TrainConfig) -> FactorModel:
    """Random factors with standard deviation ``init_scale / sqrt(d)``; zero biases."""
    if m < 1 or n < 1:
        raise InvalidInputError("m and n must be at least 1")
    d = config.dim
    rng = np.random.default_rng(config.seed)
    std = config.init_scale / np.sqrt(d)
    theta = rng.normal(0.0, std, size=(m, d))
    beta = rng.normal(0.0, std, size=(n, d))
    params = np.concatenate([theta.ravel(), beta.ravel(), np.zeros(m + n + 1)])
    return FactorModel(m, n, d, params, fitted=False)


def predict(model: FactorModel, u: int, i: int) -> float:
    return model.predict(u, i)


def predict_matrix(model: FactorModel, limit: int = DEFAULT_MATRIX_LIMIT) -> DenseRatingMatrix:
    """All ``m x n`` predictions, unclamped."""
    if model.m * model.n > limit:
        raise MemoryGuardError(f"{model.m}x{model.n} grid exceeds the {limit}-cell limit")
    values = model.theta @ model.beta.T + model.b_user[:, None] + model.b_item[None, :] + model.b_global
    return DenseRatingMatrix(values)


# --------------------------------------------------------------------------
# objectives


class Naive:
    """Unweighted mean loss over the observed ratings."""

    name = "naive"

    def arrays(self, data: RatingDataset):
        if data is None or len(data) == 0:
            raise EmptyDataError("naive objective needs observed ratings")
        n_obs = len(data)
        return data.users, data.items, data.ratings.astype(np.float64), np.ones(n_obs)


class IPS:
    """Inverse-propensity-weighted loss.

    Each record is weighted by ``(|O| / |D|) / P_hat``, which makes the
    mini-batch mean an unbiased estimate of the full-grid IPS loss.  Under
    the uniform propensity every weight is exactly 1 and training reduces
    to the naive objective.
    """

    name = "ips"

    def __init__(self, propensity):
        self.propensity = propensity

    def arrays(self, data: RatingDataset):
        if data is None or len(data) == 0:
            raise EmptyDataError("IPS objective needs observed ratings")
        p = np.asarray(self.propensity.evaluate(data.users, data.items, data.ratings), dtype=np.float64)
        if not np.all(p > 0):
            raise DivisionHazardError("non-positive propensity on an observed rating")
        rate = len(data) / data.grid_size
        return data.users, data.items, data.ratings.astype(np.float64), rate / p


class Pseudo:
    """Mean loss against pseudo-ratings; the training data argument is ignored."""

    name = "pseudo"

    def __init__(self, pseudo: PseudoLabeledSet):
        self.pseudo = pseudo

    def arrays(self, data=None):
        if len(self.pseudo) == 0:
            raise EmptyDataError("pseudo objective needs a non-empty pseudo-labeled set")
        ps = self.pseudo
        return ps.users, ps.items, ps.labels, np.ones(len(ps))


def objective_value(params, m, n, d, users, items, targets, weights, l2, loss="squared") -> float:
    """Weighted mean loss plus the L2 penalty (global bias excluded)."""
    pred = kernels.get().predict_pairs(params, m, n, d, users, items)
    resid = pred - targets
    point = resid * resid if loss == "squared" else np.abs(resid)
    body = params[:-1]
    return float(np.dot(weights, point)) / len(targets) + l2 * float(np.dot(body, body))


def objective_gradient(params, m, n, d, users, items, targets, weights, l2, loss="squared", backend=None):
    """Analytic gradient of :func:`objective_value` from the training kernel."""
    return kernels.get(backend).gradient(
        np.ascontiguousarray(params, dtype=np.float64), m, n, d,
        np.ascontiguousarray(users, dtype=np.int64), np.ascontiguousarray(items, dtype=np.int64),
        np.ascontiguousarray(targets, dtype=np.float64), np.ascontiguousarray(weights, dtype=np.float64),
        float(l2), _LOSS_CODES[loss],
    )


# --------------------------------------------------------------------------
# training


def validation_mse(model: FactorModel, validation: RatingDataset) -> float:
    pred = np.clip(model.predict_pairs(validation.users, validation.items), RATING_MIN, RATING_MAX)
    resid = pred - validation.ratings
    return fsum(resid * resid) / len(validation)


class Trainer:
    """Mutable training state for one model: parameters plus Adam moments.

    Keeps optimizer state across calls so a model can be updated in several
    separate rounds (as the tri-training loop does).
    """

    def __init__(self, model: FactorModel, config: TrainConfig, backend=None):
        self.config = config
        self.m, self.n, self.d = model.m, model.n, model.d
        self.params = np.array(model.params, dtype=np.float64)
        self.m1 = np.zeros_like(self.params)
        self.m2 = np.zeros_like(self.params)
        self._grad = np.zeros_like(self.params)
        self.step = 0
        self.epochs_run = 0
        self.fitted = model.fitted
        self.kernel = kernels.get(backend)

    @property
    def model(self) -> FactorModel:
        return FactorModel(self.m, self.n, self.d, self.params.copy(), fitted=self.fitted)

    def predict_pairs(self, users, items):
        return self.model.predict_pairs(users, items)

    def _prepare(self, users, items, targets, weights):
        if not self.fitted:
            self.params[-1] = float(np.mean(targets))
            self.fitted = True
        return (np.ascontiguousarray(users, dtype=np.int64), np.ascontiguousarray(items, dtype=np.int64),
                np.ascontiguousarray(targets, dtype=np.float64), np.ascontiguousarray(weights, dtype=np.float64))

    def run_epoch(self, users, items, targets, weights) -> float:
        """One shuffled pass; returns the full objective after the pass."""
        cfg = self.config
        users, items, targets, weights = self._prepare(users, items, targets, weights)
        rng = np.random.default_rng((cfg.seed, self.epochs_run))
        order = rng.permutation(len(targets)).astype(np.int64)
        self.step = self.kernel.adam_epoch(
            self.params, self.m1, self.m2, self._grad, self.m, self.n, self.d,
            users, items, targets, weights, order, cfg.batch_size,
            cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.l2,
            _LOSS_CODES[cfg.loss], self.step,
        )
        self.epochs_run += 1
        value = objective_value(self.params, self.m, self.n, self.d, users, items, targets, weights, cfg.l2, cfg.loss)
        if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT or not np.all(np.isfinite(self.params)):
            raise TrainingDivergedError(self.epochs_run, value)
        return value

    def fit(self, data, objective, epochs=None, validation: Optional[RatingDataset] = None) -> List[float]:
        """Run up to ``epochs`` passes (default ``config.epochs``).

        With a validation set and ``patience > 0`` training stops once the
        validation MSE has not improved for ``patience`` epochs, and the
        best parameters are restored.
        """
        epochs = self.config.epochs if epochs is None else epochs
        if epochs == 0:
            return []
        arrays = objective.arrays(data)
        use_val = validation is not None and len(validation) > 0 and self.config.patience > 0
        best_val, best_state, since_best = np.inf, None, 0
        trace = []
        for _ in range(epochs):
            trace.append(self.run_epoch(*arrays))
            if use_val:
                score = validation_mse(self.model, validation)
                if score < best_val - 1e-12:
                    best_val, since_best = score, 0
                    best_state = (self.params.copy(), self.m1.copy(), self.m2.copy(), self.step)
                else:
                    since_best += 1
                    if since_best >= self.config.patience:
                        break
        if use_val and best_state is not None:
            self.params[:], self.m1[:], self.m2[:], self.step = best_state
        return trace


def train(model: FactorModel, data, objective, config: TrainConfig,
          validation: Optional[RatingDataset] = None, backend=None) -> Tuple[FactorModel, List[float]]:
    """Train a copy of ``model``; returns the new model and the per-epoch objective trace."""
    trainer = Trainer(model, config, backend=backend)
    trace = trainer.fit(data, objective, validation=validation)
    if config.epochs == 0:
        return model, trace
    return trainer.model, trace
