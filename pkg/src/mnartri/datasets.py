"""Readers for MovieLens 100K, Yahoo! R3 and Coat, plus preprocessing.

None of the datasets ship with this package; their licenses require a
manual download (see :data:`RETRIEVAL`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .core import RATING_MAX, RATING_MIN, RatingDataset
from .errors import EmptyDataError, InvalidInputError, ParseError
from .propensity import relative_item_propensity

RETRIEVAL = {
    "movielens": "MovieLens 100K: download ml-100k.zip from https://grouplens.org/datasets/movielens/100k/ and point at ml-100k/u.data",
    "yahoo": "Yahoo! R3: request 'R3 - Yahoo! Music ratings for User Selected and Randomly Selected songs' from https://webscope.sandbox.yahoo.com/ (files ydata-ymusic-rating-study-v1-train.txt / -test.txt)",
    "coat": "Coat: download from https://www.cs.cornell.edu/~schnabts/mnar/ (train.ascii and test.ascii)",
}


@dataclass(frozen=True)
class DatasetBundle:
    train: RatingDataset
    validation: RatingDataset
    test: RatingDataset
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        grids = {(ds.m, ds.n) for ds in (self.train, self.validation, self.test)}
        if len(grids) != 1:
            raise InvalidInputError("train, validation and test must share one index space")
        if len(np.intersect1d(self.train.keys(), self.validation.keys())):
            raise InvalidInputError("train and validation share a (user, item) pair")


# --------------------------------------------------------------------------
# parsing


def _read_triples(path, sep=None, min_fields=3):
    """Parse ``user item rating [...]`` lines; returns three int arrays of
    external ids / ratings.  Blank lines are skipped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    users, items, ratings = [], [], []
    with path.open("r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split(sep)
            if sep is None:
                parts = line.split()
            if len(parts) < min_fields:
                raise ParseError(f"expected at least {min_fields} fields, got {len(parts)}", path, lineno)
            try:
                u, i, r = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError as exc:
                raise ParseError(f"non-numeric field ({exc})", path, lineno) from None
            if r != int(r) or not (RATING_MIN <= r <= RATING_MAX):
                raise ParseError(f"rating {parts[2]!r} outside {{1..5}}", path, lineno)
            users.append(u)
            items.append(i)
            ratings.append(int(r))
    if not users:
        raise EmptyDataError(f"{path}: no ratings")
    return np.array(users, np.int64), np.array(items, np.int64), np.array(ratings, np.int64)


def _compact(*id_arrays):
    """Dense 0-based indices over the union of external ids (sorted)."""
    ids = np.unique(np.concatenate(id_arrays))
    return ids, [np.searchsorted(ids, arr) for arr in id_arrays]


def load_movielens(path) -> RatingDataset:
    """MovieLens ``u.data``: tab-separated ``user item rating timestamp``."""
    users, items, ratings = _read_triples(path, sep="\t", min_fields=3)
    user_ids, (u,) = _compact(users)
    item_ids, (i,) = _compact(items)
    return RatingDataset(len(user_ids), len(item_ids), u, i, ratings, user_ids=user_ids, item_ids=item_ids)


def _read_matrix(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append([int(x) for x in line.split()])
            except ValueError as exc:
                raise ParseError(f"non-integer entry ({exc})", path, lineno) from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(f"row has {len(rows[-1])} columns, expected {len(rows[0])}", path, lineno)
    if not rows:
        raise EmptyDataError(f"{path}: empty matrix")
    mat = np.array(rows, dtype=np.int64)
    bad = (mat != 0) & ((mat < RATING_MIN) | (mat > RATING_MAX))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ParseError(f"rating {mat[r, c]} outside {{1..5}} at column {c + 1}", path, int(r) + 1)
    return mat


def _matrix_dataset(mat) -> RatingDataset:
    u, i = np.nonzero(mat)
    return RatingDataset(mat.shape[0], mat.shape[1], u, i, mat[u, i])


def load_coat(train_path, test_path, validation_fraction=0.1, seed=0,
              shape: Optional[Tuple[int, int]] = None) -> DatasetBundle:
    """Coat ``train.ascii`` / ``test.ascii``: dense integer matrices, 0 = missing.

    ``shape`` (e.g. ``(290, 300)``) is enforced when given; otherwise both
    files only need to agree with each other.
    """
    train_mat = _read_matrix(train_path)
    test_mat = _read_matrix(test_path)
    for path, mat in ((train_path, train_mat), (test_path, test_mat)):
        expected = shape or train_mat.shape
        if mat.shape != tuple(expected):
            raise ParseError(f"matrix is {mat.shape[0]}x{mat.shape[1]}, expected {expected[0]}x{expected[1]}", path)
    train = _matrix_dataset(train_mat)
    if len(train) == 0:
        raise EmptyDataError(f"{train_path}: no observed ratings")
    test = _matrix_dataset(test_mat)
    fit, val = split_validation(train, validation_fraction, seed)
    return DatasetBundle(fit, val, test, {
        "source": "coat", "seed": seed, "validation_fraction": validation_fraction,
        "train_path": str(train_path), "test_path": str(test_path),
    })


def load_yahoo(train_path, test_path, validation_fraction=0.1, seed=0) -> DatasetBundle:
    """Yahoo! R3 train (MNAR) and test (MCAR) files of ``user item rating`` lines."""
    tu, ti, tr = _read_triples(train_path)
    su, si, sr = _read_triples(test_path)
    user_ids, (tu, su) = _compact(tu, su)
    item_ids, (ti, si) = _compact(ti, si)
    m, n = len(user_ids), len(item_ids)
    kw = dict(user_ids=user_ids, item_ids=item_ids)
    train = RatingDataset(m, n, tu, ti, tr, **kw)
    test = RatingDataset(m, n, su, si, sr, **kw)
    fit, val = split_validation(train, validation_fraction, seed)
    return DatasetBundle(fit, val, test, {
        "source": "yahoo", "seed": seed, "validation_fraction": validation_fraction,
        "train_path": str(train_path), "test_path": str(test_path),
    })


# --------------------------------------------------------------------------
# preprocessing


def filter_min_items(ds: RatingDataset, k: int) -> RatingDataset:
    """Keep items with at least ``k`` ratings; items are re-indexed densely,
    users keep their indices."""
    if k < 1:
        raise InvalidInputError("min_items must be at least 1")
    counts = ds.item_counts()
    keep_items = np.flatnonzero(counts >= k)
    if len(keep_items) == 0:
        raise EmptyDataError(f"no item has {k} or more ratings")
    remap = np.full(ds.n, -1, dtype=np.int64)
    remap[keep_items] = np.arange(len(keep_items))
    mask = remap[ds.items] >= 0
    item_ids = ds.item_ids[keep_items] if ds.item_ids is not None else keep_items
    return RatingDataset(ds.m, len(keep_items), ds.users[mask], remap[ds.items[mask]], ds.ratings[mask],
                         user_ids=ds.user_ids, item_ids=item_ids)


def split_validation(ds: RatingDataset, fraction: float = 0.1, seed=0) -> Tuple[RatingDataset, RatingDataset]:
    """Uniform random split by record; validation gets ``floor(fraction * N)``."""
    if not (0 < fraction < 1):
        raise InvalidInputError(f"validation fraction {fraction} outside (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_val = int(math.floor(fraction * len(ds)))
    val_idx = np.sort(perm[:n_val])
    fit_idx = np.sort(perm[n_val:])
    return ds.subset(fit_idx), ds.subset(val_idx)


def build_ml_test(ds: RatingDataset, test_fraction: float = 0.5, seed=0,
                  validation_fraction: float = 0.1) -> DatasetBundle:
    """Train/validation/test bundle whose test set has a flat item distribution.

    A uniform ``test_fraction`` of the records forms a pool; the final test
    set is drawn from the pool with replacement, weighting each record by
    the inverse relative item propensity of ``ds``, with as many draws as
    the pool has records.
    """
    if not (0 < test_fraction < 1):
        raise InvalidInputError(f"test fraction {test_fraction} outside (0, 1)")
    if len(ds) == 0:
        raise EmptyDataError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_pool = int(math.floor(test_fraction * len(ds)))
    if n_pool == 0:
        raise EmptyDataError("test pool is empty")
    pool_idx = np.sort(perm[:n_pool])
    train_idx = np.sort(perm[n_pool:])
    weights = resampling_weights(ds, ds.items[pool_idx])
    draws = rng.choice(pool_idx, size=n_pool, replace=True, p=weights / weights.sum())
    draws = np.sort(draws)
    test = RatingDataset(ds.m, ds.n, ds.users[draws], ds.items[draws], ds.ratings[draws],
                         user_ids=ds.user_ids, item_ids=ds.item_ids, allow_duplicates=True)
    fit, val = split_validation(ds.subset(train_idx), validation_fraction, seed=(seed, 1) if isinstance(seed, int) else seed)
    return DatasetBundle(fit, val, test, {
        "source": "movielens", "seed": seed, "test_fraction": test_fraction,
        "validation_fraction": validation_fraction, "test_pool_size": n_pool,
        "min_relative_item_propensity": float(relative_item_propensity(ds).min()),
    })


def resampling_weights(ds: RatingDataset, items: np.ndarray) -> np.ndarray:
    """Inverse relative item propensity of ``ds`` for each entry of ``items``."""
    prop = relative_item_propensity(ds)
    picked = prop[np.asarray(items, dtype=np.int64)]
    if np.any(picked <= 0):
        raise InvalidInputError("item without ratings cannot be resampled")
    return 1.0 / picked


# --------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class RatingHistogram:
    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.float64)
        if counts.shape != (RATING_MAX - RATING_MIN + 1,) or np.any(counts < 0):
            raise InvalidInputError("histogram needs five non-negative counts")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_dataset(cls, ds: RatingDataset) -> "RatingHistogram":
        return cls(np.bincount(ds.ratings - RATING_MIN, minlength=RATING_MAX - RATING_MIN + 1))

    @property
    def frequencies(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            raise EmptyDataError("empty histogram")
        return self.counts / total

    def smoothed(self, alpha: float = 0.5) -> np.ndarray:
        c = self.counts + alpha
        return c / c.sum()


def rating_kl(p_hist: RatingHistogram, q_hist: RatingHistogram, smoothing: float = 0.5) -> float:
    """``KL(p || q)`` between two rating histograms, natural log.

    ``smoothing`` pseudo-counts are added to every category of both
    histograms before normalizing.
    """
    p = p_hist.smoothed(smoothing)
    q = q_hist.smoothed(smoothing)
    return float(math.fsum((p * np.log(p / q)).tolist()))


def kl_both_directions(train: RatingDataset, test: RatingDataset, smoothing: float = 0.5) -> Dict[str, float]:
    h_train = RatingHistogram.from_dataset(train)
    h_test = RatingHistogram.from_dataset(test)
    return {
        "test||train": rating_kl(h_test, h_train, smoothing),
        "train||test": rating_kl(h_train, h_test, smoothing),
    }


# --------------------------------------------------------------------------
# canonical format


def write_canonical(ds: RatingDataset, path) -> None:
    """Header ``m n count`` then one ``user item rating`` line per record."""
    lines = [f"{ds.m} {ds.n} {len(ds)}"]
    lines.extend(f"{u} {i} {r}" for u, i, r in zip(ds.users.tolist(), ds.items.tolist(), ds.ratings.tolist()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_canonical(path, allow_duplicates: bool = False) -> RatingDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ParseError("header must be 'm n count'", path, 1)
        m, n, count = (int(x) for x in header)
        body = np.loadtxt(fh, dtype=np.int64, ndmin=2) if count else np.zeros((0, 3), np.int64)
    if body.shape != (count, 3):
        raise ParseError(f"expected {count} records of 3 fields, found shape {body.shape}", path)
    return RatingDataset(m, n, body[:, 0], body[:, 1], body[:, 2], allow_duplicates=allow_duplicates)
