import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnartri.core import RATING_MAX, RATING_MIN, RatingDataset
from mnartri.errors import DegeneratePriorError, InvalidInputError, MissingInputError
from mnartri.propensity import KINDS, PropensityModel, estimate, min_propensity, rating_frequencies


def observed(seed=0, m=8, n=9):
    rng = np.random.default_rng(seed)
    mask = rng.random((m, n)) < 0.45
    mask[0, :] = True  # every item seen
    mask[:, 0] = True  # every user seen
    u, i = np.nonzero(mask)
    r = rng.integers(1, 6, len(u))
    r[:5] = [1, 2, 3, 4, 5]
    return RatingDataset(m, n, u, i, r)


def mcar(seed=9, m=8, n=9):
    rng = np.random.default_rng(seed)
    u, i = np.nonzero(rng.random((m, n)) < 0.5)
    r = rng.integers(1, 6, len(u))
    r[:5] = [1, 2, 3, 4, 5]
    return RatingDataset(m, n, u, i, r)


def test_uniform_hand_count(tiny):
    model = estimate("uniform", tiny)
    assert model(0, 1) == 0.5 and model(1, 0) == 0.5
    assert min_propensity(model) == 0.5


def test_user_counts():
    ds = RatingDataset(2, 4, [0, 0, 0, 0, 1, 1], [0, 1, 2, 3, 0, 1], [3] * 6)
    model = estimate("user", ds)
    assert model.per_user.tolist() == [1.0, 0.5]


def test_user_item_is_product():
    ds = observed()
    ui, u, i = (estimate(k, ds) for k in ("user_item", "user", "item"))
    users, items = np.indices((ds.m, ds.n))
    users, items = users.ravel(), items.ravel()
    assert np.array_equal(ui.evaluate(users, items), u.evaluate(users, items) * i.evaluate(users, items))


def test_most_active_user_is_one():
    ds = observed()
    model = estimate("user", ds)
    assert model(int(np.argmax(ds.user_counts())), 0) == 1.0


def test_item_pop_relative_counts():
    ds = RatingDataset(10, 2, list(range(10)) + list(range(5)), [0] * 10 + [1] * 5, [3] * 15)
    model = estimate("item_pop", ds)
    assert model.per_item.tolist() == [1.0, 0.5]
    assert min_propensity(model, ds) == 0.5


def test_nb_uniform_marginal_consistency():
    ds = observed()
    model = estimate("nb_uniform", ds)
    rate = len(ds) / ds.grid_size
    counts = np.bincount(ds.ratings - 1, minlength=5)
    assert np.array_equal(model.per_rating / rate, counts / len(ds)) or \
        np.allclose(model.per_rating / rate, counts / len(ds), rtol=0, atol=1e-15)


def test_nb_degenerate_without_smoothing():
    ds = RatingDataset(2, 2, [0, 1], [0, 1], [5, 5])
    model = estimate("nb_uniform", ds)
    assert model(0, 0, 5) == 0.5 and model(0, 0, 1) == 0.0
    smoothed = estimate("nb_uniform", ds, smoothing=True)
    assert smoothed(0, 0, 1) > 0


def test_nb_true_needs_reference():
    with pytest.raises(MissingInputError):
        estimate("nb_true", observed())


def test_nb_true_zero_prior():
    ref = RatingDataset(8, 9, [0], [0], [3])
    with pytest.raises(DegeneratePriorError):
        estimate("nb_true", observed(), mcar_ref=ref)


def test_nb_true_bayes_rule():
    ds, ref = observed(), mcar()
    model = estimate("nb_true", ds, mcar_ref=ref)
    rate = len(ds) / ds.grid_size
    expected = np.minimum(rating_frequencies(ds) * rate / rating_frequencies(ref), 1.0)
    assert np.allclose(model.per_rating, expected, rtol=1e-15)


def test_nb_unobserved_pairs_use_minimum():
    model = estimate("nb_uniform", observed())
    assert model.evaluate(np.array([0]), np.array([1]))[0] == model.per_rating.min()


def test_clamp_floor():
    ds = observed()
    model = estimate("item", ds, clamp_floor=0.9)
    users, items = np.indices((ds.m, ds.n))
    assert model.evaluate(users.ravel(), items.ravel()).min() >= 0.9


def test_unknown_kind():
    with pytest.raises(InvalidInputError):
        estimate("popularity", observed())


@pytest.mark.parametrize("kind", KINDS)
def test_range_and_determinism(kind):
    ds, ref = observed(3), mcar()
    model = estimate(kind, ds, mcar_ref=ref)
    users, items = np.indices((ds.m, ds.n))
    users, items = users.ravel(), items.ravel()
    ratings = np.resize(np.arange(RATING_MIN, RATING_MAX + 1), users.shape)
    p = model.evaluate(users, items, ratings)
    assert np.all(p > 0) and np.all(p <= 1)
    assert estimate(kind, ds, mcar_ref=ref).to_text() == model.to_text()


@pytest.mark.parametrize("kind", KINDS)
def test_text_round_trip(tmp_path, kind):
    model = estimate(kind, observed(), mcar_ref=mcar())
    model.save(tmp_path / "p.txt")
    again = PropensityModel.load(tmp_path / "p.txt")
    assert again.to_text() == model.to_text()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["user", "item", "item_pop", "user_item"]))
def test_normalized_max_is_one(seed, kind):
    ds = observed(seed)
    model = estimate(kind, ds)
    vec = model.per_item if kind in ("item", "item_pop") else model.per_user
    assert vec.max() == 1.0
    assert np.all(vec > 0) and np.all(vec <= 1)
