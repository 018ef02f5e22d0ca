"""Experiment pipeline shared by the command-line front end and the
acceptance suite: data loading, per-seed runs, sweeps and skewness study."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import datasets
from .config import ExperimentConfig
from .core import RATING_MAX, RATING_MIN, RatingDataset, fsum
from .datasets import DatasetBundle
from .errors import EmptyDataError, EmptyPseudoSetError, MissingInputError, TrainingDivergedError
from .evaluation import MetricsReport, evaluate, mse
from .mf import IPS, Naive, Trainer, init, validation_mse
from .propensity import estimate, min_propensity
from .synthetic import generate, sample_observations
from .tritrain import IterationTrace, Member, tri_train

logger = logging.getLogger(__name__)

# failures that abort one seed but not the whole run
SEED_FAILURES = (TrainingDivergedError, EmptyPseudoSetError, FloatingPointError)


def _require(path, key, dataset):
    if not path:
        raise MissingInputError(f"{key} is not set. {datasets.RETRIEVAL[dataset]}")
    return path


def load_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    """Train/validation/test data for ``cfg.dataset``, split with ``data_seed``."""
    if cfg.dataset == "coat":
        return datasets.load_coat(_require(cfg.coat_train, "coat_train", "coat"),
                                  _require(cfg.coat_test, "coat_test", "coat"),
                                  cfg.validation_fraction, cfg.data_seed)
    if cfg.dataset == "yahoo":
        return datasets.load_yahoo(_require(cfg.yahoo_train, "yahoo_train", "yahoo"),
                                   _require(cfg.yahoo_test, "yahoo_test", "yahoo"),
                                   cfg.validation_fraction, cfg.data_seed)
    if cfg.dataset == "movielens":
        raw = datasets.load_movielens(_require(cfg.movielens_path, "movielens_path", "movielens"))
        if cfg.min_items > 1:
            raw = datasets.filter_min_items(raw, cfg.min_items)
        return datasets.build_ml_test(raw, cfg.test_fraction, cfg.data_seed, cfg.validation_fraction)
    inst = generate(cfg.synthetic_params(), cfg.synthetic_seed)
    observed = sample_observations(inst, cfg.data_seed)
    fit, val = datasets.split_validation(observed, cfg.validation_fraction, cfg.data_seed)
    return DatasetBundle(fit, val, inst.full_dataset(), {
        "source": "synthetic", "synthetic_seed": cfg.synthetic_seed, "data_seed": cfg.data_seed,
        "test": "every cell of the grid (rounded truth)"})


def resplit(bundle: DatasetBundle, seed) -> DatasetBundle:
    """Same data with the train/validation boundary redrawn from ``seed``."""
    tr, va = bundle.train, bundle.validation
    merged = RatingDataset(tr.m, tr.n, np.concatenate([tr.users, va.users]),
                           np.concatenate([tr.items, va.items]), np.concatenate([tr.ratings, va.ratings]),
                           user_ids=tr.user_ids, item_ids=tr.item_ids)
    order = np.lexsort((merged.items, merged.users))
    merged = merged.subset(order)
    frac = len(va) / len(merged)
    if len(va) == 0:
        return bundle
    fit, val = datasets.split_validation(merged, min(max(frac, 1e-9), 1 - 1e-9), seed)
    return DatasetBundle(fit, val, bundle.test, dict(bundle.provenance, split_seed=seed))


def fit_propensity(cfg: ExperimentConfig, bundle: DatasetBundle):
    floor = cfg.clamp_floor if cfg.clamp_floor > 0 else None
    mcar = bundle.test if cfg.propensity == "nb_true" else None
    return estimate(cfg.propensity, bundle.train, mcar_ref=mcar, smoothing=cfg.propensity_smoothing,
                    clamp_floor=floor)


def member_seeds(seed: int):
    """Initialization seeds of A1, A2, A3; A1's seed is also the plain model's."""
    return 3 * seed, 3 * seed + 1, 3 * seed + 2


@dataclass
class SeedResult:
    seed: int
    report: Optional[MetricsReport] = None
    traces: List[IterationTrace] = field(default_factory=list)
    error: Optional[str] = None
    model: object = None


def train_method(cfg: ExperimentConfig, bundle: DatasetBundle, prop, seed: int, method: Optional[str] = None,
                 eval_set: Optional[RatingDataset] = None):
    """Train ``method`` once; returns ``(model, traces)``.

    ``eval_set`` feeds the per-iteration MSE recorded in tri-training traces.
    """
    method = method or cfg.method
    train, val = bundle.train, bundle.validation
    s1, s2, s3 = member_seeds(seed)
    if method in ("mf_naive", "mf_ips"):
        tc = cfg.train_config(s1)
        objective = Naive() if method == "mf_naive" else IPS(prop)
        trainer = Trainer(init(train.m, train.n, tc), tc)
        trainer.fit(train, objective, validation=val)
        return trainer.model, []
    members = []
    for s, objective in ((s1, IPS(prop)), (s2, IPS(prop)), (s3, Naive())):
        tc = cfg.train_config(s)
        members.append(Member(init(train.m, train.n, tc), tc, objective))
    hook = (lambda model: mse(model, eval_set)) if eval_set is not None else None
    result = tri_train(*members, train, cfg.tri_config(seed), eval_hook=hook, validation=val)
    return result.model, result.traces


def run_seed(cfg: ExperimentConfig, bundle: DatasetBundle, prop, seed: int, method: Optional[str] = None,
             resplit_validation: bool = True) -> SeedResult:
    """One seed: redraw the validation split, train, evaluate on the test set.

    With ``prop=None`` the propensity is fit on this seed's training split, so
    every training record has support.
    """
    data = resplit(bundle, seed) if resplit_validation and bundle.provenance.get("source") != "synthetic" \
        else bundle
    prop = fit_propensity(cfg, data) if prop is None else prop
    try:
        with np.errstate(over="raise", invalid="raise"):
            model, traces = train_method(cfg, data, prop, seed, method, eval_set=data.test)
    except SEED_FAILURES as exc:
        logger.warning("seed %d failed: %s", seed, exc)
        return SeedResult(seed, error=str(exc))
    report = evaluate(model, data.test, ks=(3,), gain=cfg.ndcg_gain, seed=seed)
    return SeedResult(seed, report, traces, model=model)


def run_seeds(cfg: ExperimentConfig, bundle: DatasetBundle, prop=None, method: Optional[str] = None,
              seeds=None) -> List[SeedResult]:
    seeds = range(cfg.base_seed, cfg.base_seed + cfg.n_seeds) if seeds is None else seeds
    return [run_seed(cfg, bundle, prop, s, method) for s in seeds]


def summarize(values) -> Dict[str, float]:
    """Mean and ``std / sqrt(n)`` (population std); stderr is NaN for one value."""
    arr = np.asarray(list(values), dtype=np.float64)
    if len(arr) == 0:
        return {"mean": math.nan, "stderr": math.nan}
    stderr = float(arr.std() / math.sqrt(len(arr))) if len(arr) > 1 else math.nan
    return {"mean": float(arr.mean()), "stderr": stderr}


# --------------------------------------------------------------------------
# hyperparameter search


SWEEP_FIELDS = ("trial", "l2", "dim", "epsilon", "val_metric")


def sweep_candidates(budget: int, seed: int):
    """Random-search candidates; the draw sequence depends only on ``seed``."""
    rng = np.random.default_rng(seed)
    out = []
    for trial in range(budget):
        l2 = float(10.0 ** rng.uniform(-6.0, 0.0))
        dim = int(5 * rng.integers(1, 11))
        eps = float(10.0 ** rng.uniform(-3.0, 0.0))
        out.append({"trial": trial, "l2": l2, "dim": dim, "epsilon": eps})
    return out


def ips_validation_mse(model, validation: RatingDataset, prop) -> float:
    """Self-normalized inverse-propensity-weighted MSE on the validation split.

    Records whose user or item has no training rating get a zero estimate
    and carry no usable weight; they are left out.
    """
    p = np.asarray(prop.evaluate(validation.users, validation.items, validation.ratings), dtype=np.float64)
    keep = p > 0
    if not keep.any():
        return math.inf
    w = 1.0 / p[keep]
    users, items = validation.users[keep], validation.items[keep]
    pred = np.clip(model.predict_pairs(users, items), RATING_MIN, RATING_MAX)
    resid = pred - validation.ratings[keep]
    return fsum(w * resid * resid) / fsum(w)


def sweep(cfg: ExperimentConfig, bundle: DatasetBundle, prop=None):
    """Returns ``(trial rows, best row)``; lower validation metric wins,
    ties go to the earlier trial.  Failed trials score ``inf``."""
    prop = fit_propensity(cfg, bundle) if prop is None else prop
    rows = []
    for cand in sweep_candidates(cfg.sweep_budget, cfg.sweep_seed):
        trial_cfg = cfg.replace(l2=cand["l2"], dim=cand["dim"], epsilon=cand["epsilon"])
        try:
            with np.errstate(over="raise", invalid="raise"):
                model, _ = train_method(trial_cfg, bundle, prop, cfg.base_seed)
            if cfg.sweep_metric == "ips":
                score = ips_validation_mse(model, bundle.validation, prop)
            else:
                score = validation_mse(model, bundle.validation)
        except SEED_FAILURES as exc:
            logger.warning("sweep trial %d failed: %s", cand["trial"], exc)
            score = math.inf
        rows.append(dict(cand, val_metric=score))
    best = min(rows, key=lambda r: (r["val_metric"], r["trial"]))
    return rows, best


# --------------------------------------------------------------------------
# propensity skewness study


RQ1_FIELDS = ("min_items", "min_propensity", "method", "mse_mean", "mse_stderr",
              "relative_mse", "relative_stderr", "n_items", "n_failed")
RQ1_METHODS = ("mf_ips", "mf_ips_at")


def rq1_setting(cfg: ExperimentConfig, raw: RatingDataset, k: int):
    """Data and item-popularity propensities after keeping items with >= k ratings."""
    ds = datasets.filter_min_items(raw, k) if k > 1 else raw
    bundle = datasets.build_ml_test(ds, cfg.test_fraction, cfg.data_seed, cfg.validation_fraction)
    prop = estimate("item_pop", ds)
    return bundle, prop, min_propensity(prop, ds)


def rq1(cfg: ExperimentConfig, raw: RatingDataset, seeds=None) -> List[Dict]:
    """MSE per ``min_items`` setting and method, with MSE relative to the
    same method at the largest ``min_items`` setting."""
    rows = []
    for k in cfg.min_items_grid():
        bundle, prop, pmin = rq1_setting(cfg, raw, k)
        for method in RQ1_METHODS:
            results = run_seeds(cfg, bundle, prop, method, seeds)
            ok = [r.report.mse for r in results if r.report is not None]
            stats = summarize(ok)
            rows.append({"min_items": k, "min_propensity": pmin, "method": method,
                         "mse_mean": stats["mean"], "mse_stderr": stats["stderr"],
                         "n_items": bundle.train.n, "n_failed": len(results) - len(ok)})
    ref_k = max(cfg.min_items_grid())
    ref = {r["method"]: r["mse_mean"] for r in rows if r["min_items"] == ref_k}
    for r in rows:
        base = ref[r["method"]]
        r["relative_mse"] = r["mse_mean"] / base
        r["relative_stderr"] = r["mse_stderr"] / base
    return rows


# --------------------------------------------------------------------------
# with/without tri-training comparison and trace descent


def compare_at(cfg: ExperimentConfig, bundle: DatasetBundle, kinds, seeds=None) -> Dict:
    """Per-seed results of ``mf_ips`` and ``mf_ips_at`` for each propensity kind.

    Returns ``{(kind, method): [SeedResult, ...]}``.
    """
    out = {}
    for kind in kinds:
        kind_cfg = cfg.replace(propensity=kind)
        for method in RQ1_METHODS:
            out[(kind, method)] = run_seeds(kind_cfg, bundle, None, method, seeds)
    return out


def metric_summary(results: List[SeedResult], metric: str) -> Dict[str, float]:
    values = []
    for r in results:
        if r.report is None:
            continue
        values.append(r.report.ndcg[3] if metric == "ndcg@3" else getattr(r.report, metric))
    return summarize(values)


@dataclass
class TraceDescent:
    first_bound_terms: float
    last_bound_terms: float
    first_test_mse: float
    last_test_mse: float
    n_runs: int

    @property
    def bound_terms_decrease(self) -> bool:
        return self.last_bound_terms < self.first_bound_terms

    @property
    def test_mse_decreases(self) -> bool:
        return self.last_test_mse < self.first_test_mse


def trace_descent(results: List[SeedResult]) -> TraceDescent:
    """Seed-averaged ``term_a + term_b`` and test MSE at the first and last iteration."""
    runs = [r.traces for r in results if r.traces]
    if not runs:
        raise EmptyDataError("no tri-training traces to summarize")
    first = [t[0] for t in runs]
    last = [t[-1] for t in runs]
    return TraceDescent(
        float(np.mean([t.term_a + t.term_b for t in first])),
        float(np.mean([t.term_a + t.term_b for t in last])),
        float(np.mean([t.test_mse for t in first])),
        float(np.mean([t.test_mse for t in last])),
        len(runs),
    )
