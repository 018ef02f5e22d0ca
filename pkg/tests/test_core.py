import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnartri.core import (
    ABSOLUTE,
    SQUARED,
    ConstantPredictor,
    DenseRatingMatrix,
    InteractionRecord,
    PointwiseLoss,
    PseudoLabeledSet,
    RatingDataset,
    TablePredictor,
    grid_disagreement,
    ideal_loss,
    ips_loss,
    naive_loss,
    pseudo_loss,
)
from mnartri.errors import DivisionHazardError, EmptyDataError, InvalidInputError
from mnartri.propensity import PropensityModel, estimate


class TestRatingDataset:
    def test_rejects_out_of_range_rating(self):
        with pytest.raises(InvalidInputError):
            RatingDataset(2, 2, [0], [0], [6])

    def test_rejects_index_outside_grid(self):
        with pytest.raises(InvalidInputError):
            RatingDataset(2, 2, [2], [0], [3])

    def test_rejects_duplicate_pair(self):
        with pytest.raises(InvalidInputError):
            RatingDataset(2, 2, [0, 0], [1, 1], [3, 4])

    def test_duplicates_allowed_when_flagged(self):
        ds = RatingDataset(2, 2, [0, 0], [1, 1], [3, 4], allow_duplicates=True)
        assert len(ds) == 2

    @pytest.mark.parametrize("m,n", [(0, 3), (3, 0)])
    def test_rejects_empty_grid(self, m, n):
        with pytest.raises(InvalidInputError):
            RatingDataset(m, n, [], [], [])

    def test_arrays_are_read_only(self, tiny):
        with pytest.raises(ValueError):
            tiny.ratings[0] = 5

    def test_from_records_round_trip(self, tiny):
        again = RatingDataset.from_records(2, 2, list(tiny))
        assert again == tiny
        assert list(tiny)[0] == InteractionRecord(0, 0, 1)

    def test_grid_size_uses_header(self, tiny):
        assert tiny.grid_size == 4


class TestPointwiseLoss:
    def test_triangle_flags(self):
        assert ABSOLUTE.triangle
        assert not SQUARED.triangle

    def test_default_bounds(self):
        assert ABSOLUTE.delta == 4.0
        assert SQUARED.delta == 16.0

    def test_unknown_kind(self):
        with pytest.raises(InvalidInputError):
            PointwiseLoss("hinge")


class TestIdealLoss:
    def test_exact_prediction_is_zero(self):
        truth = DenseRatingMatrix(np.array([[1.0, 2.5], [4.0, 5.0]]))
        for loss in (ABSOLUTE, SQUARED):
            assert ideal_loss(TablePredictor(truth.values), truth, loss) == 0.0

    def test_one_by_two_squared(self):
        truth = DenseRatingMatrix(np.array([[1.0, 3.0]]))
        assert ideal_loss(ConstantPredictor(1, 2, 2.0), truth, SQUARED) == pytest.approx(1.0)

    def test_two_by_two_absolute(self):
        truth = DenseRatingMatrix(np.full((2, 2), 5.0))
        assert ideal_loss(ConstantPredictor(2, 2, 4.0), truth, ABSOLUTE) == pytest.approx(1.0)

    def test_rejects_non_finite_truth(self):
        with pytest.raises(InvalidInputError):
            DenseRatingMatrix(np.array([[1.0, np.nan]]))


class TestNaiveLoss:
    def test_exact_prediction_is_zero(self, tiny):
        pred = TablePredictor(np.array([[1.0, 0.0], [0.0, 3.0]]))
        assert naive_loss(pred, tiny, SQUARED) == 0.0

    def test_hand_value_squared(self, tiny):
        assert naive_loss(ConstantPredictor(2, 2, 2.0), tiny, SQUARED) == pytest.approx(1.0)

    def test_hand_value_absolute(self):
        ds = RatingDataset(1, 1, [0], [0], [5])
        assert naive_loss(ConstantPredictor(1, 1, 1.0), ds, ABSOLUTE) == pytest.approx(4.0)

    def test_empty_is_an_error(self):
        with pytest.raises(EmptyDataError):
            naive_loss(ConstantPredictor(2, 2, 3.0), RatingDataset(2, 2, [], [], []), SQUARED)


class TestIpsLoss:
    def test_hand_value(self, tiny):
        prop = PropensityModel("uniform", 2, 2, global_rate=0.5)
        # pointwise absolute losses 1 and 3 against prediction 2 and 0 -> (1/4)(1/.5 + 3/.5)
        pred = TablePredictor(np.array([[2.0, 0.0], [0.0, 0.0]]))
        assert ips_loss(pred, tiny, prop, ABSOLUTE) == pytest.approx(2.0)

    def test_uniform_matches_naive(self, tiny):
        prop = estimate("uniform", tiny)
        pred = ConstantPredictor(2, 2, 4.2)
        assert abs(ips_loss(pred, tiny, prop, SQUARED) - naive_loss(pred, tiny, SQUARED)) < 1e-12

    def test_zero_when_exact(self, tiny):
        prop = PropensityModel("item", 2, 2, per_item=np.array([0.01, 0.7]))
        pred = TablePredictor(np.array([[1.0, 0.0], [0.0, 3.0]]))
        assert ips_loss(pred, tiny, prop, SQUARED) == 0.0

    def test_zero_propensity_is_a_hazard(self, tiny):
        prop = PropensityModel("item", 2, 2, per_item=np.array([0.0, 1.0]))
        with pytest.raises(DivisionHazardError):
            ips_loss(ConstantPredictor(2, 2, 3.0), tiny, prop, SQUARED)


class TestPseudoLoss:
    def test_hand_values(self):
        pset = PseudoLabeledSet(1, 2, [0, 0], [0, 1], [3.0, 5.0], 0.1, 0)
        assert pseudo_loss(ConstantPredictor(1, 2, 4.0), pset, ABSOLUTE) == pytest.approx(1.0)
        one = PseudoLabeledSet(1, 1, [0], [0], [2.0], 0.1, 0)
        assert pseudo_loss(ConstantPredictor(1, 1, 2.5), one, SQUARED) == pytest.approx(0.25)

    def test_matching_labels_is_zero(self):
        pset = PseudoLabeledSet(1, 2, [0, 0], [0, 1], [3.0, 5.0], 0.1, 0)
        assert pseudo_loss(TablePredictor(np.array([[3.0, 5.0]])), pset, SQUARED) == 0.0


def test_grid_disagreement_of_identical_predictors_is_zero():
    a = ConstantPredictor(3, 4, 2.0)
    assert grid_disagreement(a, a, ABSOLUTE) == 0.0


triples = st.tuples(*(st.floats(1.0, 5.0, allow_nan=False) for _ in range(3)))


@given(triples)
def test_absolute_loss_triangle_inequality(xyz):
    x, y, z = xyz
    assert ABSOLUTE(x, z) <= ABSOLUTE(x, y) + ABSOLUTE(y, z) + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3.0, 9.0))
def test_estimators_bounded_by_delta(seed, value):
    rng = np.random.default_rng(seed)
    m, n = 4, 5
    mask = rng.random((m, n)) < 0.5
    mask[0, 0] = True
    u, i = np.nonzero(mask)
    ds = RatingDataset(m, n, u, i, rng.integers(1, 6, len(u)))
    pred = ConstantPredictor(m, n, value)
    truth = DenseRatingMatrix(rng.uniform(1, 5, (m, n)))
    for loss in (ABSOLUTE, SQUARED):
        for v in (naive_loss(pred, ds, loss, clip=(1, 5)), ideal_loss(pred, truth, loss, clip=(1, 5))):
            assert 0.0 <= v <= loss.delta + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_estimators_permutation_insensitive(seed):
    rng = np.random.default_rng(seed)
    m, n = 8, 9
    mask = rng.random((m, n)) < 0.6
    mask[0, 0] = True
    u, i = np.nonzero(mask)
    ds = RatingDataset(m, n, u, i, rng.integers(1, 6, len(u)))
    perm = rng.permutation(len(ds))
    shuffled = ds.subset(perm)
    pred = TablePredictor(rng.normal(3, 1, (m, n)))
    prop = estimate("item", ds)
    assert math.isclose(naive_loss(pred, ds, SQUARED), naive_loss(pred, shuffled, SQUARED), rel_tol=0, abs_tol=1e-12)
    assert math.isclose(ips_loss(pred, ds, prop, SQUARED), ips_loss(pred, shuffled, prop, SQUARED), rel_tol=0, abs_tol=1e-12)
