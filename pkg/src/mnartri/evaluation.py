"""Test-set metrics and multi-seed aggregation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .core import RATING_MAX, RATING_MIN, RatingDataset, fsum
from .errors import EmptyDataError, InvalidInputError

METRIC_FIELDS = ("dataset", "propensity", "method", "seed", "mae", "mse", "ndcg@3")


def _clipped_predictions(pred, test):
    if len(test) == 0:
        raise EmptyDataError("empty test set")
    return np.clip(np.asarray(pred.predict_pairs(test.users, test.items), dtype=np.float64), RATING_MIN, RATING_MAX)


def mae(pred, test: RatingDataset) -> float:
    """Mean absolute error with predictions clamped to [1, 5]."""
    resid = _clipped_predictions(pred, test) - test.ratings
    return fsum(np.abs(resid)) / len(test)


def mse(pred, test: RatingDataset) -> float:
    """Mean squared error with predictions clamped to [1, 5]."""
    resid = _clipped_predictions(pred, test) - test.ratings
    return fsum(resid * resid) / len(test)


def _gain(ratings, gain):
    if gain == "exp":
        return np.power(2.0, ratings) - 1.0
    if gain == "linear":
        return ratings.astype(np.float64)
    raise InvalidInputError(f"unknown gain {gain!r}")


def ndcg_at_k(pred, test: RatingDataset, k: int, gain: str = "exp", scores: Optional[np.ndarray] = None) -> float:
    """Mean nDCG@k over users with at least one test rating.

    Each user's test items are ranked by predicted rating (descending, ties
    by ascending item index).  ``gain`` is ``"exp"`` (2^r - 1) or
    ``"linear"`` (r).  ``scores`` may be passed instead of ``pred`` to rank
    by precomputed values.
    """
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    if len(test) == 0:
        raise EmptyDataError("no rankable user in an empty test set")
    if scores is None:
        scores = np.asarray(pred.predict_pairs(test.users, test.items), dtype=np.float64)
    users, items = test.users, test.items
    gains = _gain(test.ratings, gain)

    # group by user; within a user order by score desc, then item asc
    order = np.lexsort((items, -scores, users))
    ideal = np.lexsort((-gains, users))
    u_sorted = users[order]
    starts = np.flatnonzero(np.r_[True, u_sorted[1:] != u_sorted[:-1]])
    ends = np.r_[starts[1:], len(order)]
    rank = np.arange(len(order)) - np.repeat(starts, ends - starts)
    discount = np.where(rank < k, 1.0 / np.log2(rank + 2.0), 0.0)
    dcg = np.add.reduceat(gains[order] * discount, starts)
    idcg = np.add.reduceat(gains[ideal] * discount, starts)
    valid = idcg > 0
    if not valid.any():
        raise EmptyDataError("no user with a nonzero ideal DCG")
    return float(np.mean(dcg[valid] / idcg[valid]))


@dataclass
class MetricsReport:
    mae: float
    mse: float
    ndcg: Dict[int, float]
    n_users_ranked: int
    seed: Optional[int] = None


def evaluate(pred, test: RatingDataset, ks: Sequence[int] = (3,), gain: str = "exp", seed=None) -> MetricsReport:
    scores = np.asarray(pred.predict_pairs(test.users, test.items), dtype=np.float64)
    return MetricsReport(
        mae=mae(pred, test),
        mse=mse(pred, test),
        ndcg={k: ndcg_at_k(None, test, k, gain=gain, scores=scores) for k in ks},
        n_users_ranked=int(len(np.unique(test.users))),
        seed=seed,
    )


def _flatten(report: MetricsReport) -> Dict[str, float]:
    out = {"mae": report.mae, "mse": report.mse}
    for k, v in sorted(report.ndcg.items()):
        out[f"ndcg@{k}"] = v
    return out


def aggregate(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, float]]:
    """Per-metric mean and standard error ``std / sqrt(n)`` (population std)."""
    if len(reports) < 2:
        raise InvalidInputError("aggregation needs at least two reports")
    rows = [_flatten(r) for r in reports]
    out = {}
    for key in rows[0]:
        values = np.array([row[key] for row in rows])
        out[key] = {"mean": float(values.mean()), "stderr": float(values.std() / math.sqrt(len(values)))}
    return out


def write_metrics_csv(path, rows: Sequence[Mapping]) -> None:
    """Rows with keys ``dataset, propensity, method, seed, mae, mse, ndcg@3``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def metrics_row(dataset, propensity, method, report: MetricsReport) -> Dict:
    return {"dataset": dataset, "propensity": propensity, "method": method, "seed": report.seed,
            "mae": report.mae, "mse": report.mse, "ndcg@3": report.ndcg.get(3, float("nan"))}


TABLE_FIELDS = ("dataset", "propensity",
                "mae_without_at", "mae_with_at", "mse_without_at", "mse_with_at",
                "ndcg@3_without_at", "ndcg@3_with_at",
                "mae_stderr_without_at", "mae_stderr_with_at",
                "mse_stderr_without_at", "mse_stderr_with_at",
                "ndcg@3_stderr_without_at", "ndcg@3_stderr_with_at")


def comparison_table(aggregates: Mapping) -> List[Dict]:
    """Table rows comparing methods with and without tri-training.

    ``aggregates`` maps ``(dataset, propensity, method)`` to the output of
    :func:`aggregate`; ``mf_ips`` is the "without" column and
    ``mf_ips_at`` the "with" column.
    """
    keys = sorted({(d, p) for d, p, _ in aggregates})
    rows = []
    for dataset, prop in keys:
        row = {"dataset": dataset, "propensity": prop}
        for method, suffix in (("mf_ips", "without_at"), ("mf_ips_at", "with_at")):
            agg = aggregates.get((dataset, prop, method))
            for metric in ("mae", "mse", "ndcg@3"):
                stats = agg.get(metric) if agg else None
                row[f"{metric}_{suffix}"] = stats["mean"] if stats else ""
                row[f"{metric}_stderr_{suffix}"] = stats["stderr"] if stats else ""
        rows.append(row)
    return rows


def write_table_csv(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
