"""Propensity estimators for explicit-feedback observation probabilities.

Seven kinds are supported:

``uniform``      global observation rate ``|O| / (m * n)``
``user``         per-user count over the largest per-user count
``item``         per-item count over the largest per-item count
``user_item``    product of the user and item estimates
``nb_uniform``   ``P(R=r | O=1) * P(O=1)``, indexed by the realized rating
``nb_true``      ``nb_uniform / P(R=r)`` with the prior taken from MCAR data
``item_pop``     relative item propensity used to resample the MovieLens test set

Naive-Bayes kinds are evaluated at the rating of the observed record.  For
unobserved pairs (diagnostics only) the minimum over ratings is used.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import RATING_MAX, RATING_MIN, RatingDataset
from .errors import (
    DegeneratePriorError,
    EmptyDataError,
    InvalidInputError,
    MissingInputError,
    ParseError,
)

KINDS = ("uniform", "user", "item", "user_item", "nb_uniform", "nb_true", "item_pop")
NB_KINDS = ("nb_uniform", "nb_true")


def rating_frequencies(ds: RatingDataset, smoothing: bool = False) -> np.ndarray:
    """Empirical ``P(R=r)`` for r = 1..5; add-one smoothing on request."""
    counts = np.bincount(ds.ratings - RATING_MIN, minlength=RATING_MAX - RATING_MIN + 1).astype(np.float64)
    if smoothing:
        counts += 1.0
    total = counts.sum()
    if total == 0:
        raise EmptyDataError("rating frequencies of an empty dataset")
    return counts / total


def relative_item_propensity(ds: RatingDataset) -> np.ndarray:
    """Per-item observation count divided by the largest item count."""
    counts = ds.item_counts().astype(np.float64)
    if counts.max() == 0:
        raise EmptyDataError("relative item propensity of an empty dataset")
    return counts / counts.max()


def _relative_user_propensity(ds):
    counts = ds.user_counts().astype(np.float64)
    return counts / counts.max()


@dataclass(frozen=True, eq=False)
class PropensityModel:
    kind: str
    m: int
    n: int
    global_rate: float = 1.0
    per_user: Optional[np.ndarray] = None
    per_item: Optional[np.ndarray] = None
    per_rating: Optional[np.ndarray] = None
    clamp_floor: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown propensity kind {self.kind!r}")
        if self.clamp_floor is not None and not (0 < self.clamp_floor <= 1):
            raise InvalidInputError("clamp_floor must lie in (0, 1]")
        for name in ("per_user", "per_item", "per_rating"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype=np.float64)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    def with_clamp(self, floor: Optional[float]) -> "PropensityModel":
        return PropensityModel(
            self.kind, self.m, self.n, self.global_rate,
            self.per_user, self.per_item, self.per_rating, floor,
        )

    def evaluate(self, users, items, ratings=None) -> np.ndarray:
        """Propensities for index arrays; ``ratings`` is required for NB kinds."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.m):
            raise InvalidInputError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= self.n):
            raise InvalidInputError("item index out of range")
        kind = self.kind
        if kind == "uniform":
            p = np.full(users.shape, self.global_rate)
        elif kind == "user":
            p = self.per_user[users]
        elif kind in ("item", "item_pop"):
            p = self.per_item[items]
        elif kind == "user_item":
            p = self.per_user[users] * self.per_item[items]
        else:
            if ratings is None:
                # unobserved pairs: most conservative value over ratings
                p = np.full(users.shape, float(self.per_rating.min()))
                return np.maximum(p, self.clamp_floor) if self.clamp_floor is not None else p
            ratings = np.asarray(ratings, dtype=np.int64)
            if ratings.size and (ratings.min() < RATING_MIN or ratings.max() > RATING_MAX):
                raise InvalidInputError("rating outside {1..5}")
            p = self.per_rating[ratings - RATING_MIN]
            p = np.broadcast_to(p, users.shape).copy()
        p = np.asarray(p, dtype=np.float64)
        if self.clamp_floor is not None:
            p = np.maximum(p, self.clamp_floor)
        return p

    def __call__(self, u, i, r=None) -> float:
        ratings = None if r is None else np.array([r])
        return float(self.evaluate(np.array([u]), np.array([i]), ratings)[0])

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"kind {self.kind}\n")
        buf.write(f"shape {self.m} {self.n}\n")
        buf.write(f"global {self.global_rate:.12f}\n")
        buf.write(f"clamp_floor {'none' if self.clamp_floor is None else format(self.clamp_floor, '.12f')}\n")
        for name in ("per_user", "per_item", "per_rating"):
            arr = getattr(self, name)
            if arr is None:
                buf.write(f"{name} none\n")
            else:
                buf.write(f"{name} {len(arr)}\n")
                buf.write(" ".join(format(x, ".12f") for x in arr.tolist()))
                buf.write("\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "PropensityModel":
        lines = iter(text.splitlines())
        fields = {}
        try:
            fields["kind"] = next(lines).split()[1]
            _, m, n = next(lines).split()
            fields["m"], fields["n"] = int(m), int(n)
            fields["global_rate"] = float(next(lines).split()[1])
            clamp = next(lines).split()[1]
            fields["clamp_floor"] = None if clamp == "none" else float(clamp)
            for name in ("per_user", "per_item", "per_rating"):
                head = next(lines).split()
                if head[0] != name:
                    raise ParseError(f"expected {name} block, found {head[0]!r}")
                if head[1] == "none":
                    fields[name] = None
                else:
                    values = np.array(next(lines).split(), dtype=np.float64)
                    if len(values) != int(head[1]):
                        raise ParseError(f"{name} length mismatch")
                    fields[name] = values
        except (StopIteration, IndexError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"truncated or malformed propensity file ({exc})") from exc
        return cls(**fields)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "PropensityModel":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def estimate(
    kind: str,
    train: RatingDataset,
    mcar_ref: Optional[RatingDataset] = None,
    smoothing: bool = False,
    clamp_floor: Optional[float] = None,
) -> PropensityModel:
    """Fit a propensity model of ``kind`` on the observed training data.

    Parameters
    ----------
    kind : str
        One of :data:`KINDS`.
    train : RatingDataset
        Observed MNAR ratings.  Grid size ``m * n`` is taken from the header.
    mcar_ref : RatingDataset, optional
        MCAR ratings for the rating prior; required iff ``kind == "nb_true"``.
    smoothing : bool
        Add-one smoothing of the naive-Bayes rating tables.
    clamp_floor : float, optional
        Lower bound applied at evaluation time.
    """
    if kind not in KINDS:
        raise InvalidInputError(f"unknown propensity kind {kind!r}; choose from {', '.join(KINDS)}")
    if len(train) == 0:
        raise EmptyDataError("cannot estimate propensities from an empty dataset")
    if kind == "nb_true" and mcar_ref is None:
        raise MissingInputError("nb_true propensity requires MCAR reference ratings")
    m, n = train.m, train.n
    rate = len(train) / train.grid_size
    common = dict(kind=kind, m=m, n=n, global_rate=rate, clamp_floor=clamp_floor)
    if kind == "uniform":
        return PropensityModel(**common)
    if kind == "user":
        return PropensityModel(per_user=_relative_user_propensity(train), **common)
    if kind in ("item", "item_pop"):
        return PropensityModel(per_item=relative_item_propensity(train), **common)
    if kind == "user_item":
        return PropensityModel(
            per_user=_relative_user_propensity(train),
            per_item=relative_item_propensity(train),
            **common,
        )
    cond = rating_frequencies(train, smoothing=smoothing)
    table = cond * rate
    if kind == "nb_true":
        if len(mcar_ref) == 0:
            raise EmptyDataError("MCAR reference set is empty")
        raw_prior = rating_frequencies(mcar_ref, smoothing=False)
        if np.any(raw_prior == 0) and not smoothing:
            missing = [r for r, p in zip(range(RATING_MIN, RATING_MAX + 1), raw_prior) if p == 0]
            raise DegeneratePriorError(f"MCAR prior has no mass on ratings {missing}")
        prior = rating_frequencies(mcar_ref, smoothing=smoothing)
        # Bayes' rule gives P(O=1 | R=r); estimates can overshoot 1 slightly
        table = np.minimum(table / prior, 1.0)
    return PropensityModel(per_rating=table, **common)


def min_propensity(model: PropensityModel, dataset: Optional[RatingDataset] = None) -> float:
    """Smallest propensity the model assigns over the grid.

    Users or items with no observations in the fitting data carry a zero
    estimate and cannot be weighted; they are excluded, so the minimum is
    taken over the supported part of the grid.  ``dataset`` only fixes the
    grid dimensions and is checked against the model.
    """
    if dataset is not None and (dataset.m, dataset.n) != (model.m, model.n):
        raise InvalidInputError("dataset grid does not match the propensity model")

    def support_min(vec):
        pos = vec[vec > 0]
        return float(pos.min()) if len(pos) else 0.0

    kind = model.kind
    if kind == "uniform":
        value = model.global_rate
    elif kind == "user":
        value = support_min(model.per_user)
    elif kind in ("item", "item_pop"):
        value = support_min(model.per_item)
    elif kind == "user_item":
        value = support_min(model.per_user) * support_min(model.per_item)
    else:
        value = support_min(model.per_rating)
    if model.clamp_floor is not None:
        value = max(value, model.clamp_floor)
    return value


@dataclass(frozen=True, eq=False)
class GridPropensity:
    """Propensities given cell by cell as an ``m x n`` array (synthetic truth)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidInputError("propensity grid must be 2-D")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def m(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[1]

    def evaluate(self, users, items, ratings=None) -> np.ndarray:
        return self.values[np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64)]
