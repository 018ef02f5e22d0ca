"""Asymmetric tri-training and the bound terms it is meant to shrink.

Two predictors (A1, A2) are pre-trained on the observed ratings, usually
with an inverse-propensity objective and different initializations.  Grid
pairs where they agree within ``epsilon`` receive A1's prediction as a
pseudo-rating; a third predictor (A3, trained with the plain loss) and both
labelers are then updated on that pseudo-labeled set, which is rebuilt
after every iteration.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    RATING_MAX,
    RATING_MIN,
    ABSOLUTE,
    DenseRatingMatrix,
    PointwiseLoss,
    PseudoLabeledSet,
    RatingDataset,
    grid_disagreement,
    ideal_loss,
    iter_grid,
    ips_loss,
    pseudo_loss,
)
from .errors import EmptyPseudoSetError, InvalidInputError, InvalidLossError
from .mf import FactorModel, Naive, Pseudo, TrainConfig, Trainer

logger = logging.getLogger(__name__)

CLIP = (RATING_MIN, RATING_MAX)
TRACE_FIELDS = ("iteration", "term_a", "term_b", "pseudo_size", "test_mse")


class _Clipped:
    def __init__(self, pred, lo=RATING_MIN, hi=RATING_MAX):
        self.pred, self.lo, self.hi = pred, lo, hi
        self.m, self.n = pred.m, pred.n

    def predict_pairs(self, users, items):
        return np.clip(self.pred.predict_pairs(users, items), self.lo, self.hi)


def _clip_pseudo(pseudo: PseudoLabeledSet) -> PseudoLabeledSet:
    return PseudoLabeledSet(pseudo.m, pseudo.n, pseudo.users, pseudo.items,
                            np.clip(pseudo.labels, RATING_MIN, RATING_MAX),
                            pseudo.epsilon, pseudo.source_iteration)


# --------------------------------------------------------------------------
# pseudo-labeling


def sample_dprime(m: int, n: int, fraction: float = 1.0, seed=0) -> Tuple[np.ndarray, np.ndarray]:
    """Grid pairs to pseudo-label: the whole grid, or ``floor(fraction * m * n)``
    pairs drawn uniformly without replacement (returned in row-major order)."""
    if not (0 < fraction <= 1):
        raise InvalidInputError(f"D' fraction {fraction} outside (0, 1]")
    total = m * n
    if fraction == 1:
        keys = np.arange(total, dtype=np.int64)
    else:
        size = int(math.floor(fraction * total))
        rng = np.random.default_rng(seed)
        keys = np.sort(rng.choice(total, size=size, replace=False)).astype(np.int64)
    return keys // n, keys % n


def make_pseudo_labels(a1, a2, dprime: Tuple[np.ndarray, np.ndarray], epsilon: float,
                       source_iteration: int = 0) -> PseudoLabeledSet:
    """Keep the pairs of ``dprime`` where ``|A1 - A2| <= epsilon``, labeled by A1."""
    if not epsilon > 0:
        raise InvalidInputError("epsilon must be positive")
    users, items = (np.asarray(x, dtype=np.int64) for x in dprime)
    p1 = np.asarray(a1.predict_pairs(users, items), dtype=np.float64)
    p2 = np.asarray(a2.predict_pairs(users, items), dtype=np.float64)
    keep = np.abs(p1 - p2) <= epsilon
    if not keep.any():
        raise EmptyPseudoSetError(source_iteration, epsilon)
    return PseudoLabeledSet(a1.m, a1.n, users[keep], items[keep], p1[keep], epsilon, source_iteration)


# --------------------------------------------------------------------------
# the procedure


@dataclass(frozen=True)
class TriConfig:
    epsilon: float = 0.1
    n_iterations: int = 10
    n_steps: int = 10
    dprime_fraction: float = 1.0
    seed: int = 0
    trace_loss: str = "absolute"

    def __post_init__(self):
        if not (1e-3 <= self.epsilon <= 1):
            raise InvalidInputError(f"epsilon={self.epsilon} outside [1e-3, 1]")
        if self.n_iterations < 0 or self.n_steps < 0:
            raise InvalidInputError("iteration and step counts must be non-negative")
        if not (0 < self.dprime_fraction <= 1):
            raise InvalidInputError("dprime_fraction must lie in (0, 1]")


@dataclass
class Member:
    """A trainable predictor: starting model, its training config and the
    objective used for pre-training on the observed ratings."""

    model: FactorModel
    config: TrainConfig
    objective: object = field(default_factory=Naive)


@dataclass
class IterationTrace:
    iteration: int
    term_a: float
    term_b: float
    pseudo_set_size: int
    test_mse: Optional[float] = None


@dataclass
class TriResult:
    model: FactorModel
    traces: List[IterationTrace]
    pretrained: Tuple[FactorModel, FactorModel, FactorModel]
    labelers: Tuple[FactorModel, FactorModel]
    last_pseudo: Optional[PseudoLabeledSet] = None


def tri_train(
    a1: Member,
    a2: Member,
    a3: Member,
    observed: RatingDataset,
    config: TriConfig,
    eval_hook: Optional[Callable[[FactorModel], float]] = None,
    validation: Optional[RatingDataset] = None,
) -> TriResult:
    """Run asymmetric tri-training and return A3 with per-iteration traces.

    ``eval_hook`` maps the current A3 to a test MSE recorded in the trace.
    ``validation`` (optional) drives early stopping during pre-training.
    A1 and A2 are updated only on pseudo-ratings after pre-training; one
    "step" is one full mini-batch pass over the pseudo-labeled set.
    """
    if len(observed) == 0:
        raise InvalidInputError("tri-training needs observed ratings")
    if a1.model == a2.model and type(a1.objective) is type(a2.objective):
        raise InvalidInputError("A1 and A2 must differ (initialization or objective)")
    trace_loss = PointwiseLoss(config.trace_loss)
    trainers = [Trainer(member.model, member.config) for member in (a1, a2, a3)]
    for member, trainer in zip((a1, a2, a3), trainers):
        trainer.fit(observed, member.objective, validation=validation)
    t1, t2, t3 = trainers
    pretrained = tuple(t.model for t in trainers)
    if config.n_iterations == 0:
        return TriResult(pretrained[2], [], pretrained, pretrained[:2])

    m, n = observed.m, observed.n

    def relabel(iteration):
        dprime = sample_dprime(m, n, config.dprime_fraction, seed=(config.seed, iteration))
        return make_pseudo_labels(t1.model, t2.model, dprime, config.epsilon, iteration)

    pseudo = relabel(0)
    traces = []
    for it in range(1, config.n_iterations + 1):
        objective = Pseudo(pseudo)
        arrays = objective.arrays()
        for _ in range(config.n_steps):
            t1.run_epoch(*arrays)
            t2.run_epoch(*arrays)
            t3.run_epoch(*arrays)
        a3_model = t3.model
        term_a = pseudo_loss(_Clipped(a3_model), _clip_pseudo(pseudo), trace_loss)
        term_b = grid_disagreement(t1.model, t2.model, trace_loss, clip=CLIP)
        test_mse = float(eval_hook(a3_model)) if eval_hook is not None else None
        traces.append(IterationTrace(it, term_a, term_b, len(pseudo), test_mse))
        logger.info("iteration %d: a=%.5f b=%.5f |D~|=%d", it, term_a, term_b, len(pseudo))
        if it < config.n_iterations:
            pseudo = relabel(it)
    return TriResult(t3.model, traces, pretrained, (t1.model, t2.model), pseudo)


def write_traces_csv(path, traces: Sequence[IterationTrace]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)
        for t in traces:
            writer.writerow([t.iteration, repr(t.term_a), repr(t.term_b), t.pseudo_set_size,
                             "" if t.test_mse is None else repr(t.test_mse)])


def read_traces_csv(path) -> List[IterationTrace]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [IterationTrace(int(r["iteration"]), float(r["term_a"]), float(r["term_b"]),
                           int(r["pseudo_size"]), float(r["test_mse"]) if r["test_mse"] else None)
            for r in rows]


# --------------------------------------------------------------------------
# bounds


@dataclass
class BoundReport:
    """Terms of either generalization bound; fields not computed stay ``None``.

    For the pseudo-label bound: ``term_a`` (loss on pseudo-ratings),
    ``term_b`` (A1/A2 disagreement), ``term_c`` (A2's true loss), ``bias``
    and ``complexity``.  For the IPS bound: ``empirical`` (IPS loss),
    ``bias`` and ``variance``.
    """

    kind: str
    complexity: float = 0.0
    term_a: Optional[float] = None
    term_b: Optional[float] = None
    term_c: Optional[float] = None
    bias: Optional[float] = None
    empirical: Optional[float] = None
    variance: Optional[float] = None
    lhs: Optional[float] = None
    rhs: Optional[float] = None

    @property
    def holds(self) -> Optional[bool]:
        if self.lhs is None or self.rhs is None:
            return None
        return self.lhs <= self.rhs


def _check_conf(hypothesis_count, delta_conf):
    if hypothesis_count < 1:
        raise InvalidInputError("hypothesis space must hold at least one predictor")
    if not (0 < delta_conf < 1):
        raise InvalidInputError("confidence delta must lie in (0, 1)")


def pseudo_complexity(delta: float, pseudo_size: int, grid_size: int, hypothesis_count: int,
                      delta_conf: float) -> float:
    """``(Delta / |D~|) * sqrt(|D| / 2 * log(2 |H| / delta))``."""
    _check_conf(hypothesis_count, delta_conf)
    if pseudo_size < 1:
        raise InvalidInputError("pseudo-labeled set is empty")
    return delta / pseudo_size * math.sqrt(grid_size / 2.0 * math.log(2.0 * hypothesis_count / delta_conf))


def bound_terms(a1, a2, a3, pseudo: PseudoLabeledSet, grid_size: int, loss: PointwiseLoss,
                hypothesis_count: int, delta_conf: float,
                truth: Optional[DenseRatingMatrix] = None) -> BoundReport:
    """Terms of the propensity-free bound on A3's true loss.

    Predictions and pseudo-ratings are clipped to the rating range so the
    loss stays below ``loss.delta``.  With ``truth`` the report also carries
    ``term_c``, the bias term (full-grid A3/A1 loss minus the realized
    pseudo loss), ``lhs`` = A3's true loss and ``rhs``.
    """
    if not loss.triangle:
        raise InvalidLossError(f"{loss.kind} loss violates the triangle inequality")
    if loss.delta < loss.natural_delta:
        raise InvalidInputError(f"loss bound {loss.delta} is below the attainable maximum {loss.natural_delta}")
    c1, c2, c3 = _Clipped(a1), _Clipped(a2), _Clipped(a3)
    labels = _clip_pseudo(pseudo)
    report = BoundReport(
        kind="pseudo",
        complexity=pseudo_complexity(loss.delta, len(pseudo), grid_size, hypothesis_count, delta_conf),
        term_a=pseudo_loss(c3, labels, loss),
        term_b=grid_disagreement(c1, c2, loss),
    )
    if truth is not None:
        report.term_c = ideal_loss(c2, truth, loss)
        report.bias = grid_disagreement(c3, c1, loss) - report.term_a
        report.lhs = ideal_loss(c3, truth, loss)
        report.rhs = report.term_a + report.bias + report.term_b + report.term_c + report.complexity
    return report


def ips_bound(pred, observed: RatingDataset, est_prop, true_prop, loss: PointwiseLoss,
                   hypothesis_count: int, delta_conf: float,
                   truth: Optional[DenseRatingMatrix] = None) -> BoundReport:
    """Bias and variance terms of the IPS generalization bound.

    ``est_prop`` and ``true_prop`` need ``evaluate(users, items, ratings)``
    over the whole grid; naive-Bayes models are evaluated at the true
    ratings, so they require ``truth``.
    """
    _check_conf(hypothesis_count, delta_conf)
    m, n = observed.m, observed.n
    grid = m * n
    ratings_grid = None
    if truth is not None:
        ratings_grid = np.clip(np.rint(truth.values), RATING_MIN, RATING_MAX).astype(np.int64)
    bias_parts, inv_sq_parts = [], []
    for users, items in iter_grid(m, n):
        r = None if ratings_grid is None else ratings_grid[users, items]
        p_hat = np.asarray(est_prop.evaluate(users, items, r), dtype=np.float64)
        if not np.all(p_hat > 0):
            raise InvalidInputError("estimated propensities must be positive on the whole grid")
        p_true = np.asarray(true_prop.evaluate(users, items, r), dtype=np.float64)
        bias_parts.append(math.fsum(np.abs(1.0 - p_true / p_hat).tolist()))
        inv_sq_parts.append(math.fsum((1.0 / (p_hat * p_hat)).tolist()))
    delta = loss.delta
    report = BoundReport(
        kind="ips",
        empirical=ips_loss(_Clipped(pred), observed, est_prop, loss),
        bias=delta / grid * math.fsum(bias_parts),
        variance=delta / grid * math.sqrt(0.5 * math.log(2.0 * hypothesis_count / delta_conf))
        * math.sqrt(math.fsum(inv_sq_parts)),
    )
    report.complexity = report.variance
    if truth is not None:
        report.lhs = ideal_loss(_Clipped(pred), truth, loss)
        report.rhs = report.empirical + report.bias + report.variance
    return report
