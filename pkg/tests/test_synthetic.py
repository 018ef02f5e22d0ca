import math

import numpy as np
import pytest

from mnartri.core import ABSOLUTE, SQUARED, ConstantPredictor, PointwiseLoss, TablePredictor
from mnartri.errors import InvalidInputError
from mnartri.synthetic import (
    SyntheticInstance,
    SyntheticParams,
    estimator_bias_study,
    generate,
    load_instance,
    sample_observations,
    save_instance,
    verify_bounds,
)


class TestGenerate:
    def test_seeded(self):
        a = generate(SyntheticParams(), seed=5)
        b = generate(SyntheticParams(), seed=5)
        assert np.array_equal(a.truth.values, b.truth.values) and np.array_equal(a.propensity, b.propensity)

    def test_ranges(self):
        inst = generate(SyntheticParams(m=15, n=12, p_min=0.1, p_max=0.8), seed=1)
        assert inst.truth.values.min() >= 1 and inst.truth.values.max() <= 5
        assert inst.propensity.min() >= 0.1 - 1e-12 and inst.propensity.max() == pytest.approx(0.8)

    def test_no_rating_correlation(self):
        inst = generate(SyntheticParams(corr=0.0, skew=1.0), seed=2)
        # propensity depends on the item only: every column is constant
        assert np.allclose(inst.propensity, inst.propensity[0:1, :])

    def test_no_skew(self):
        inst = generate(SyntheticParams(corr=0.0, skew=0.0, p_min=0.3, p_max=0.3), seed=2)
        assert np.allclose(inst.propensity, 0.3)

    @pytest.mark.parametrize("kw", [dict(m=0), dict(n=201), dict(p_min=0.0), dict(p_min=0.6, p_max=0.5),
                                    dict(rank=0), dict(skew=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidInputError):
            SyntheticParams(**kw)


def constant_instance(value, m=10, n=10):
    base = generate(SyntheticParams(m=m, n=n), seed=0)
    return SyntheticInstance(base.truth, np.full((m, n), value), base.params, 0)


class TestSampling:
    def test_fully_observed(self):
        inst = constant_instance(1.0)
        assert len(sample_observations(inst, seed=0)) == 100

    def test_binomial_count(self):
        inst = constant_instance(0.5)
        sizes = np.array([len(sample_observations(inst, seed=s)) for s in range(1000)])
        sigma = math.sqrt(100 * 0.25)
        assert abs(sizes.mean() - 50) < 4 * sigma / math.sqrt(1000)
        assert np.all(np.abs(sizes - 50) < 6 * sigma)

    def test_tiny_propensity_tolerated(self):
        inst = constant_instance(1e-9)
        assert len(sample_observations(inst, seed=0)) == 0

    def test_per_pair_frequency(self):
        inst = generate(SyntheticParams(m=5, n=5, p_min=0.1, p_max=0.9), seed=4)
        draws = 10_000
        hits = np.zeros((5, 5))
        for s in range(draws):
            obs = sample_observations(inst, seed=s)
            hits[obs.users, obs.items] += 1
        freq = hits / draws
        radius = 4 * np.sqrt(inst.propensity * (1 - inst.propensity) / draws)
        assert np.all(np.abs(freq - inst.propensity) <= radius)

    def test_ratings_are_rounded_truth(self):
        inst = generate(SyntheticParams(), seed=3)
        obs = sample_observations(inst, seed=1)
        assert np.array_equal(obs.ratings, np.rint(inst.truth.values[obs.users, obs.items]).astype(int))


class TestBiasStudy:
    def test_mcar_both_cover(self):
        inst = constant_instance(0.3)
        study = estimator_bias_study(inst, ConstantPredictor(10, 10, 3.0), SQUARED, 2000, seed=0)
        assert study.covers("ips", 4) and study.covers("naive", 4)

    def test_mnar_naive_biased(self, skewed_instance):
        pred = ConstantPredictor(10, 10, 5.0)  # error largest where observation is rarest
        study = estimator_bias_study(skewed_instance, pred, SQUARED, 2000, seed=1)
        assert study.covers("ips", 4)
        assert not study.covers("naive", 4)

    def test_too_few_trials(self, skewed_instance):
        with pytest.raises(InvalidInputError):
            estimator_bias_study(skewed_instance, ConstantPredictor(10, 10, 3.0), SQUARED, 1)


class TestVerifyBounds:
    def test_passes_and_zero_bias(self, skewed_instance):
        summary = verify_bounds(skewed_instance, trial_count=40, delta_conf=0.05, seed=0)
        assert summary.ips_exact_max_bias == 0.0
        assert summary.ips_fraction >= 0.99 and summary.pseudo_fraction >= 0.99

    def test_refuses_understated_delta(self, skewed_instance):
        with pytest.raises(InvalidInputError):
            verify_bounds(skewed_instance, 5, loss=PointwiseLoss("absolute", delta=3.0))

    def test_seeded(self, skewed_instance):
        assert verify_bounds(skewed_instance, 5, seed=2) == verify_bounds(skewed_instance, 5, seed=2)


def test_instance_round_trip(tmp_path):
    inst = generate(SyntheticParams(m=4, n=6), seed=9)
    save_instance(inst, tmp_path / "inst")
    again = load_instance(tmp_path / "inst")
    assert np.array_equal(again.truth.values, inst.truth.values)
    assert np.array_equal(again.propensity, inst.propensity)
    assert again.params == inst.params and again.seed == inst.seed
