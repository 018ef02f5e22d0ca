"""Synthetic MNAR instances with known ratings and propensities.

Used to check estimator (un)biasedness by Monte Carlo and to evaluate both
sides of the generalization bounds, which needs the full rating matrix.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    ABSOLUTE,
    RATING_MAX,
    RATING_MIN,
    DenseRatingMatrix,
    PointwiseLoss,
    RatingDataset,
    TablePredictor,
    ideal_loss,
    ips_loss,
    naive_loss,
)
from .datasets import read_canonical, write_canonical
from .errors import InvalidInputError
from .mf import FactorModel
from .propensity import GridPropensity
from .tritrain import bound_terms, make_pseudo_labels, sample_dprime, ips_bound

MAX_SIDE = 200


@dataclass(frozen=True)
class SyntheticParams:
    """Generator settings.

    ``skew`` is the exponent of the item-popularity power law (0 gives equal
    popularity); ``corr`` scales how strongly the observation probability
    grows with the rating (0 makes it independent of the rating).
    Propensities are rescaled into ``[p_min, p_max]``.
    """

    m: int = 10
    n: int = 10
    rank: int = 3
    skew: float = 1.0
    corr: float = 1.0
    p_min: float = 0.05
    p_max: float = 1.0

    def __post_init__(self):
        if not (1 <= self.m <= MAX_SIDE and 1 <= self.n <= MAX_SIDE):
            raise InvalidInputError(f"synthetic grids are limited to {MAX_SIDE}x{MAX_SIDE}")
        if self.rank < 1:
            raise InvalidInputError("rank must be at least 1")
        if self.p_min <= 0:
            raise InvalidInputError("p_min must be positive")
        if not (self.p_min <= self.p_max <= 1):
            raise InvalidInputError("need p_min <= p_max <= 1")
        if self.skew < 0:
            raise InvalidInputError("skew must be non-negative")


@dataclass(frozen=True, eq=False)
class SyntheticInstance:
    truth: DenseRatingMatrix
    propensity: np.ndarray
    params: SyntheticParams
    seed: int

    @property
    def m(self):
        return self.truth.m

    @property
    def n(self):
        return self.truth.n

    @property
    def observable(self) -> DenseRatingMatrix:
        """Truth rounded to the integer ratings that observations report."""
        return DenseRatingMatrix(np.clip(np.rint(self.truth.values), RATING_MIN, RATING_MAX))

    @property
    def true_propensity(self) -> GridPropensity:
        return GridPropensity(self.propensity)

    def full_dataset(self) -> RatingDataset:
        users, items = np.indices((self.m, self.n))
        return RatingDataset(self.m, self.n, users.ravel(), items.ravel(),
                             self.observable.values.ravel().astype(np.int64))


def generate(params: SyntheticParams, seed=0) -> SyntheticInstance:
    rng = np.random.default_rng(seed)
    m, n = params.m, params.n
    u = rng.normal(size=(m, params.rank))
    v = rng.normal(size=(n, params.rank))
    raw = u @ v.T
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-12:
        truth = np.full((m, n), 0.5 * (RATING_MIN + RATING_MAX))
    else:
        truth = RATING_MIN + (RATING_MAX - RATING_MIN) * (raw - lo) / (hi - lo)
    truth = np.clip(truth, RATING_MIN, RATING_MAX)

    popularity_rank = rng.permutation(n) + 1.0
    popularity = popularity_rank ** (-params.skew)
    weight = popularity[None, :] * np.exp(params.corr * (truth - RATING_MAX))
    scaled = weight / weight.max()
    prop = params.p_min + (params.p_max - params.p_min) * scaled
    return SyntheticInstance(DenseRatingMatrix(truth), prop, params, seed)


def sample_observations(inst: SyntheticInstance, seed=0) -> RatingDataset:
    """Each cell observed independently with its propensity; ratings rounded."""
    rng = np.random.default_rng(seed)
    mask = rng.random(inst.propensity.shape) < inst.propensity
    users, items = np.nonzero(mask)
    ratings = inst.observable.values[users, items].astype(np.int64)
    return RatingDataset(inst.m, inst.n, users, items, ratings)


def _trial_seed(seed, trial):
    return np.random.SeedSequence([int(seed), int(trial)])


@dataclass
class BiasStudy:
    ideal: float
    naive_mean: float
    naive_ci: float
    naive_stderr: float
    ips_mean: float
    ips_ci: float
    ips_stderr: float
    n_trials: int
    skipped: int

    def covers(self, estimator: str, radius_in_stderr: Optional[float] = None) -> bool:
        mean = getattr(self, f"{estimator}_mean")
        radius = getattr(self, f"{estimator}_ci") if radius_in_stderr is None else \
            radius_in_stderr * getattr(self, f"{estimator}_stderr")
        return abs(mean - self.ideal) <= radius


def estimator_bias_study(inst: SyntheticInstance, pred, loss: PointwiseLoss, n_trials: int,
                         seed=0, propensity=None, min_trials: int = 1000) -> BiasStudy:
    """Monte Carlo means and 95% normal-approximation radii of the naive and
    IPS estimators over resampled observations, against the exact ideal loss.

    The ideal loss is taken against the rounded ratings, the values the
    observations carry.  Trials with no observation are skipped.
    """
    if n_trials < max(2, min_trials):
        raise InvalidInputError(f"need at least {max(2, min_trials)} trials for a confidence radius")
    prop = propensity if propensity is not None else inst.true_propensity
    ideal = ideal_loss(pred, inst.observable, loss)
    naive_vals, ips_vals = [], []
    skipped = 0
    for t in range(n_trials):
        obs = sample_observations(inst, _trial_seed(seed, t))
        if len(obs) == 0:
            skipped += 1
            continue
        naive_vals.append(naive_loss(pred, obs, loss))
        ips_vals.append(ips_loss(pred, obs, prop, loss))
    k = len(naive_vals)
    if k < 2:
        raise InvalidInputError("fewer than two non-empty trials")
    naive_arr, ips_arr = np.array(naive_vals), np.array(ips_vals)
    naive_se = naive_arr.std(ddof=1) / math.sqrt(k)
    ips_se = ips_arr.std(ddof=1) / math.sqrt(k)
    return BiasStudy(ideal, float(naive_arr.mean()), float(1.96 * naive_se), float(naive_se),
                     float(ips_arr.mean()), float(1.96 * ips_se), float(ips_se), n_trials, skipped)


# --------------------------------------------------------------------------
# bound verification


@dataclass
class VerifySummary:
    trials: int
    delta_conf: float
    ips_passes: int
    pseudo_passes: int
    ips_exact_max_bias: float
    ips_misspecified_passes: int

    @property
    def ips_fraction(self):
        return self.ips_passes / self.trials

    @property
    def pseudo_fraction(self):
        return self.pseudo_passes / self.trials

    @property
    def ips_misspecified_fraction(self):
        return self.ips_misspecified_passes / self.trials


def _hypotheses(inst, count, rng):
    """Noisy copies of the truth at increasing noise levels, clipped to range."""
    base = inst.observable.values
    out = []
    for level in np.linspace(0.2, 2.0, count):
        noisy = np.clip(base + rng.normal(0.0, level, size=base.shape), RATING_MIN, RATING_MAX)
        out.append(TablePredictor(noisy))
    return out


def _random_model(m, n, d, rng, scale=0.3):
    return FactorModel.from_blocks(
        rng.normal(0, scale, (m, d)), rng.normal(0, scale, (n, d)),
        rng.normal(0, scale, m), rng.normal(0, scale, n), 3.0,
    )


def verify_bounds(inst: SyntheticInstance, trial_count: int = 100, delta_conf: float = 0.05, seed=0,
                  loss: PointwiseLoss = ABSOLUTE, hypothesis_count: int = 10, epsilon: float = 0.5,
                  model_dim: int = 2) -> VerifySummary:
    """Seeded trials of both bounds with the true ratings supplied.

    IPS bound: a fixed hypothesis set of noisy predictors; each trial draws
    observations and checks the bound at the IPS empirical risk minimizer,
    once with the true propensities and once with the uniform estimate.
    Pseudo-label bound: each trial draws three random factor models and
    pseudo-labels the full grid.
    """
    if loss.delta < loss.natural_delta:
        raise InvalidInputError(
            f"loss bound {loss.delta} is below the attainable maximum {loss.natural_delta}; refusing to verify")
    if not loss.triangle:
        raise InvalidInputError(f"{loss.kind} loss violates the triangle inequality")
    if trial_count < 1:
        raise InvalidInputError("trial_count must be positive")
    truth = inst.observable
    true_prop = inst.true_propensity
    hyp = _hypotheses(inst, hypothesis_count, np.random.default_rng(_trial_seed(seed, 2**31)))
    t1_pass = t1_miss_pass = t2_pass = 0
    max_bias = 0.0
    for t in range(trial_count):
        obs = sample_observations(inst, _trial_seed(seed, t))
        rate = max(len(obs), 1) / (inst.m * inst.n)
        uniform = GridPropensity(np.full((inst.m, inst.n), rate))
        for prop, exact in ((true_prop, True), (uniform, False)):
            risks = [ips_loss(h, obs, prop, loss) for h in hyp]
            erm = hyp[int(np.argmin(risks))]
            report = ips_bound(erm, obs, prop, true_prop, loss, hypothesis_count, delta_conf, truth=truth)
            if exact:
                max_bias = max(max_bias, report.bias)
                t1_pass += bool(report.holds)
            else:
                t1_miss_pass += bool(report.holds)

        rng = np.random.default_rng(_trial_seed(seed, trial_count + t))
        a1, a2, a3 = (_random_model(inst.m, inst.n, model_dim, rng) for _ in range(3))
        dprime = sample_dprime(inst.m, inst.n, 1.0)
        pseudo = make_pseudo_labels(a1, a2, dprime, max(epsilon, _min_epsilon(a1, a2, dprime)), t)
        report = bound_terms(a1, a2, a3, pseudo, inst.m * inst.n, loss, hypothesis_count, delta_conf, truth=truth)
        t2_pass += bool(report.holds)
    return VerifySummary(trial_count, delta_conf, t1_pass, t2_pass, max_bias, t1_miss_pass)


def _min_epsilon(a1, a2, dprime):
    gap = np.abs(a1.predict_pairs(*dprime) - a2.predict_pairs(*dprime))
    return float(gap.min()) + 1e-12


# --------------------------------------------------------------------------
# serialization


def _write_grid(values, path):
    lines = (" ".join(repr(float(x)) for x in row) for row in np.asarray(values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _read_grid(path):
    return np.loadtxt(path, dtype=np.float64, ndmin=2)


def save_instance(inst: SyntheticInstance, directory) -> None:
    """Writes ``ratings.txt`` (canonical format, every cell, rounded ratings),
    ``truth.ascii`` and ``propensity.ascii`` (real grids) and ``params.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_canonical(inst.full_dataset(), directory / "ratings.txt")
    _write_grid(inst.truth.values, directory / "truth.ascii")
    _write_grid(inst.propensity, directory / "propensity.ascii")
    (directory / "params.json").write_text(
        json.dumps({"params": asdict(inst.params), "seed": inst.seed}, sort_keys=True) + "\n", encoding="utf-8")


def load_instance(directory) -> SyntheticInstance:
    directory = Path(directory)
    meta = json.loads((directory / "params.json").read_text(encoding="utf-8"))
    truth = DenseRatingMatrix(_read_grid(directory / "truth.ascii"))
    prop = _read_grid(directory / "propensity.ascii")
    ratings = read_canonical(directory / "ratings.txt")
    inst = SyntheticInstance(truth, prop, SyntheticParams(**meta["params"]), meta["seed"])
    if ratings != inst.full_dataset():
        raise InvalidInputError("ratings.txt disagrees with truth.ascii")
    return inst
