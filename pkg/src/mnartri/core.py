"""Core data types, pointwise losses and the four loss estimators.

Every estimator is a pure function over immutable inputs.  Sums are taken
with :func:`math.fsum` so results do not depend on record order.
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Protocol, Tuple

import numpy as np

from .errors import DivisionHazardError, EmptyDataError, InvalidInputError

RATING_MIN = 1
RATING_MAX = 5
RATING_VALUES = np.arange(RATING_MIN, RATING_MAX + 1)

# rows per chunk when sweeping the full m x n grid
_GRID_CHUNK = 1 << 20


def fsum(values) -> float:
    """Correctly rounded sum of a numpy array (or any iterable of floats)."""
    if isinstance(values, np.ndarray):
        values = values.ravel().tolist()
    return math.fsum(values)


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


class InteractionRecord(NamedTuple):
    user: int
    item: int
    rating: int


@dataclass(frozen=True, eq=False)
class RatingDataset:
    """Sparse observed ratings over an ``m x n`` grid.

    ``user_ids``/``item_ids`` optionally hold the external ids behind the
    dense 0-based indices.  ``allow_duplicates`` is only used for test sets
    resampled with replacement.
    """

    m: int
    n: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_ids: Optional[np.ndarray] = None
    item_ids: Optional[np.ndarray] = None
    allow_duplicates: bool = False

    def __post_init__(self):
        m, n = int(self.m), int(self.n)
        if m <= 0 or n <= 0:
            raise InvalidInputError(f"grid dimensions must be positive, got {m}x{n}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "n", n)
        users = _frozen(self.users, np.int64).ravel()
        items = _frozen(self.items, np.int64).ravel()
        ratings = _frozen(self.ratings, np.int64).ravel()
        if not (len(users) == len(items) == len(ratings)):
            raise InvalidInputError("users, items and ratings must have equal length")
        if len(users):
            if users.min() < 0 or users.max() >= m:
                raise InvalidInputError(f"user index out of range [0, {m})")
            if items.min() < 0 or items.max() >= n:
                raise InvalidInputError(f"item index out of range [0, {n})")
            if ratings.min() < RATING_MIN or ratings.max() > RATING_MAX:
                bad = ratings[(ratings < RATING_MIN) | (ratings > RATING_MAX)][0]
                raise InvalidInputError(f"rating {bad} outside {{1..5}}")
            if not self.allow_duplicates:
                keys = users * n + items
                if len(np.unique(keys)) != len(keys):
                    raise InvalidInputError("duplicate (user, item) pair")
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "ratings", ratings)
        if self.user_ids is not None:
            object.__setattr__(self, "user_ids", _frozen(self.user_ids, np.int64))
        if self.item_ids is not None:
            object.__setattr__(self, "item_ids", _frozen(self.item_ids, np.int64))

    @classmethod
    def from_records(cls, m, n, records, **kwargs) -> "RatingDataset":
        records = list(records)
        if records:
            u, i, r = zip(*records)
        else:
            u, i, r = (), (), ()
        return cls(m, n, np.asarray(u, np.int64), np.asarray(i, np.int64), np.asarray(r, np.int64), **kwargs)

    def __len__(self) -> int:
        return len(self.ratings)

    def __iter__(self) -> Iterator[InteractionRecord]:
        for u, i, r in zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()):
            yield InteractionRecord(u, i, r)

    @property
    def grid_size(self) -> int:
        return self.m * self.n

    def keys(self) -> np.ndarray:
        return self.users * self.n + self.items

    def record_set(self) -> set:
        return set(self)

    def subset(self, index) -> "RatingDataset":
        """Records selected by ``index`` (mask or integer array), same grid."""
        return RatingDataset(
            self.m, self.n, self.users[index], self.items[index], self.ratings[index],
            user_ids=self.user_ids, item_ids=self.item_ids,
            allow_duplicates=self.allow_duplicates,
        )

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n)

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.m)

    def __eq__(self, other):
        if not isinstance(other, RatingDataset):
            return NotImplemented
        return (
            self.m == other.m and self.n == other.n
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.ratings, other.ratings)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DenseRatingMatrix:
    """A fully known ``m x n`` rating grid (synthetic ground truth)."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        if values.ndim != 2 or 0 in values.shape:
            raise InvalidInputError("dense rating matrix must be a non-empty 2-D array")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("dense rating matrix has non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


class Predictor(Protocol):
    """Anything that maps (user, item) index arrays to real predictions."""

    m: int
    n: int

    def predict_pairs(self, users: np.ndarray, items: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ConstantPredictor:
    m: int
    n: int
    value: float

    def predict_pairs(self, users, items):
        return np.full(np.shape(users), float(self.value))


@dataclass(frozen=True, eq=False)
class TablePredictor:
    """Predictions read from a dense table; a test double for models."""

    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "table", _frozen(self.table, np.float64))

    @property
    def m(self):
        return self.table.shape[0]

    @property
    def n(self):
        return self.table.shape[1]

    def predict_pairs(self, users, items):
        return self.table[np.asarray(users), np.asarray(items)]


# --------------------------------------------------------------------------
# pointwise losses


def _loss_values(kind, x, y):
    diff = np.subtract(x, y, dtype=np.float64)
    if kind == "absolute":
        return np.abs(diff)
    return diff * diff


@functools.lru_cache(maxsize=None)
def _grid_triangle_check(kind) -> bool:
    grid = np.arange(2, 11) / 2.0  # 1.0, 1.5, ..., 5.0
    for x, y, z in itertools.product(grid, repeat=3):
        lhs = _loss_values(kind, x, z)
        rhs = _loss_values(kind, x, y) + _loss_values(kind, y, z)
        if lhs > rhs + 1e-12:
            return False
    return True


_NATURAL_DELTA = {"absolute": float(RATING_MAX - RATING_MIN), "squared": float(RATING_MAX - RATING_MIN) ** 2}


@dataclass(frozen=True)
class PointwiseLoss:
    """Absolute or squared loss with an upper bound ``delta``.

    ``delta`` defaults to the largest loss reachable on predictions clamped
    to the rating range (4 for absolute, 16 for squared).
    """

    kind: str = "squared"
    delta: Optional[float] = None

    def __post_init__(self):
        if self.kind not in _NATURAL_DELTA:
            raise InvalidInputError(f"unknown loss kind {self.kind!r}")
        if self.delta is None:
            object.__setattr__(self, "delta", _NATURAL_DELTA[self.kind])
        elif not self.delta > 0:
            raise InvalidInputError("loss bound delta must be positive")

    @property
    def natural_delta(self) -> float:
        return _NATURAL_DELTA[self.kind]

    @property
    def triangle(self) -> bool:
        return _grid_triangle_check(self.kind)

    def __call__(self, x, y):
        return _loss_values(self.kind, x, y)


ABSOLUTE = PointwiseLoss("absolute")
SQUARED = PointwiseLoss("squared")


def _predict(pred, users, items, clip):
    values = np.asarray(pred.predict_pairs(users, items), dtype=np.float64)
    if clip is not None:
        values = np.clip(values, clip[0], clip[1])
    return values


def _check_grid(pred, m, n):
    if (getattr(pred, "m", m), getattr(pred, "n", n)) != (m, n):
        raise InvalidInputError(
            f"predictor grid {getattr(pred, 'm', '?')}x{getattr(pred, 'n', '?')} "
            f"does not match data grid {m}x{n}"
        )


def iter_grid(m, n, chunk=_GRID_CHUNK):
    """Yield ``(users, items)`` index arrays covering the grid row-major."""
    rows = max(1, chunk // n)
    cols = np.arange(n)
    for start in range(0, m, rows):
        stop = min(m, start + rows)
        users = np.repeat(np.arange(start, stop), n)
        items = np.tile(cols, stop - start)
        yield users, items


def ideal_loss(pred: Predictor, truth: DenseRatingMatrix, loss: PointwiseLoss, clip=None) -> float:
    """Average loss over every cell of the true rating matrix."""
    m, n = truth.shape
    _check_grid(pred, m, n)
    partial = []
    for users, items in iter_grid(m, n):
        values = loss(truth.values[users, items], _predict(pred, users, items, clip))
        partial.append(fsum(values))
    return math.fsum(partial) / (m * n)


def grid_disagreement(pred_a: Predictor, pred_b: Predictor, loss: PointwiseLoss, clip=None) -> float:
    """Average loss between two predictors over the full grid."""
    m, n = pred_a.m, pred_a.n
    _check_grid(pred_b, m, n)
    partial = []
    for users, items in iter_grid(m, n):
        values = loss(_predict(pred_a, users, items, clip), _predict(pred_b, users, items, clip))
        partial.append(fsum(values))
    return math.fsum(partial) / (m * n)


def naive_loss(pred: Predictor, observed: RatingDataset, loss: PointwiseLoss, clip=None) -> float:
    if len(observed) == 0:
        raise EmptyDataError("naive loss of an empty observed set")
    _check_grid(pred, observed.m, observed.n)
    values = loss(observed.ratings, _predict(pred, observed.users, observed.items, clip))
    return fsum(values) / len(observed)


def ips_loss(pred: Predictor, observed: RatingDataset, prop, loss: PointwiseLoss, clip=None) -> float:
    """Inverse-propensity-weighted loss normalized by the full grid size.

    ``prop`` is anything with ``evaluate(users, items, ratings)``; a
    :class:`~mnartri.propensity.PropensityModel` in practice.
    """
    _check_grid(pred, observed.m, observed.n)
    if len(observed) == 0:
        return 0.0
    p = np.asarray(prop.evaluate(observed.users, observed.items, observed.ratings), dtype=np.float64)
    if not np.all(p > 0):
        k = int(np.argmin(p > 0))
        raise DivisionHazardError(
            f"non-positive propensity {p[k]!r} at observed pair "
            f"({observed.users[k]}, {observed.items[k]})"
        )
    values = loss(observed.ratings, _predict(pred, observed.users, observed.items, clip)) / p
    return fsum(values) / observed.grid_size


@dataclass(frozen=True, eq=False)
class PseudoLabeledSet:
    """Grid pairs where two predictors agree within ``epsilon``.

    ``labels`` are the first predictor's predictions at creation time.
    """

    m: int
    n: int
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    epsilon: float
    source_iteration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "users", _frozen(self.users, np.int64).ravel())
        object.__setattr__(self, "items", _frozen(self.items, np.int64).ravel())
        object.__setattr__(self, "labels", _frozen(self.labels, np.float64).ravel())
        if not (len(self.users) == len(self.items) == len(self.labels)):
            raise InvalidInputError("users, items and labels must have equal length")
        if not self.epsilon > 0:
            raise InvalidInputError("epsilon must be positive")

    def __len__(self):
        return len(self.labels)


def pseudo_loss(pred: Predictor, pseudo: PseudoLabeledSet, loss: PointwiseLoss, clip=None) -> float:
    if len(pseudo) == 0:
        raise EmptyDataError("pseudo loss of an empty pseudo-labeled set")
    _check_grid(pred, pseudo.m, pseudo.n)
    values = loss(_predict(pred, pseudo.users, pseudo.items, clip), pseudo.labels)
    return fsum(values) / len(pseudo)
