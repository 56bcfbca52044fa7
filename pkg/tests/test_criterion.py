import math

import numpy as np
import pytest

from pmchoice import (
    CriterionEvaluator,
    DgpConfig,
    LogitOracle,
    PanelDataset,
    PeriodPair,
    Smoother,
    criterion_value,
    sign_restriction,
    sign_restriction_subset,
    simulate,
    smooth,
    subset_criterion_value,
)
from pmchoice.criterion import criterion_value_reference


def erf_series(x, terms=60):
    """Independent error-function oracle: alternating Taylor series."""
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


def adjusted_cdf_oracle(z):
    """2*Phi(max(z,0)) - 1 through the series oracle."""
    return erf_series(max(z, 0.0) / math.sqrt(2.0))


class StubGamma:
    """Returns fixed per-product values regardless of covariates."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def predict(self, j, pair, rows):
        sign = 1.0 if pair.is_canonical else -1.0
        return np.full(len(rows), sign * self.values[j])


def two_product_dataset(dx1, dx2):
    """One agent, two products, two periods with given covariate diffs."""
    d = len(dx1)
    x = np.zeros((1, 2, 2, d))
    x[0, 0, 0, :] = dx1  # period-0 minus period-1 equals dx
    x[0, 1, 0, :] = dx2
    y = np.zeros((1, 2, 2))
    y[0, 0, 0] = 1.0
    y[0, 1, 1] = 1.0
    return PanelDataset(x, y)


class TestSmoothers:
    @pytest.mark.parametrize("kind", ["indicator", "positive-part", "adjusted-cdf"])
    def test_zero_and_negative_vanish(self, kind):
        assert smooth(kind, 0.0) == 0.0
        assert smooth(kind, -5.0) == 0.0
        z = np.linspace(-3, 0, 50)
        assert np.all(smooth(kind, z) == 0.0)

    @pytest.mark.parametrize("kind", ["indicator", "positive-part", "adjusted-cdf"])
    def test_positive_on_positives(self, kind):
        z = np.linspace(1e-12, 4, 50)
        assert np.all(smooth(kind, z) > 0.0)

    @pytest.mark.parametrize("kind", ["indicator", "positive-part", "adjusted-cdf"])
    def test_nondecreasing(self, kind):
        z = np.linspace(-2, 4, 400)
        g = smooth(kind, z)
        assert np.all(np.diff(g) >= 0.0)

    def test_adjusted_cdf_matches_series_oracle(self):
        for z in (0.25, 0.5, 1.0, 1.7, 3.0):
            assert abs(smooth("adjusted-cdf", z) - adjusted_cdf_oracle(z)) <= 1e-12
        assert abs(smooth("adjusted-cdf", 1.0) - 0.6826894921370859) <= 1e-12

    def test_adjusted_cdf_bounded_by_one(self):
        assert np.all(smooth("adjusted-cdf", np.linspace(0, 50, 100)) <= 1.0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            Smoother("sigmoid")


class TestSignRestriction:
    def test_all_zero_differences_hit(self):
        assert sign_restriction(np.zeros((3, 2)), 1, [1.0, 0.0]) == 1.0

    def test_own_down_others_up(self):
        dx = np.array([[-0.5, 0.0], [0.3, 0.0]])
        beta = np.array([1.0, 0.0])
        assert sign_restriction(dx, 0, beta) == 1.0
        dx2 = dx.copy()
        dx2[0, 0] = 0.1
        assert sign_restriction(dx2, 0, beta) == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        dx = rng.standard_normal((50, 3, 4))
        beta = rng.standard_normal(4)
        for c in (0.1, 2.0, 731.0):
            assert np.array_equal(
                sign_restriction(dx, 1, beta), sign_restriction(dx, 1, c * beta)
            )

    def test_singleton_subset_reduces(self):
        rng = np.random.default_rng(1)
        dx = rng.standard_normal((100, 3, 2))
        beta = np.array([0.6, -0.8])
        for j in range(3):
            assert np.array_equal(
                sign_restriction_subset(dx, [j], beta), sign_restriction(dx, j, beta)
            )

    def test_full_subset(self):
        dx = -np.ones((2, 2))
        assert sign_restriction_subset(dx, [0, 1], np.array([1.0, 1.0])) == 1.0

    def test_three_product_patterns(self):
        beta = np.array([1.0])
        dx = np.array([[-1.0], [-1.0], [1.0]])  # signs (-, -, +)
        assert sign_restriction_subset(dx, [0, 1], beta) == 1.0
        dx2 = np.array([[-1.0], [1.0], [1.0]])  # signs (-, +, +)
        assert sign_restriction_subset(dx2, [0, 1], beta) == 0.0

    def test_empty_subset_rejected(self):
        with pytest.raises(ValueError):
            sign_restriction_subset(np.zeros((2, 2)), [], np.ones(2))


class TestCriterionHandValues:
    def test_single_direction_hand_example(self):
        # One agent; differences fixed at (0.2, -0.1); covariate diffs
        # make the restriction bind for product 0 only.  With only the
        # forward ordering included, the criterion is exactly G(0.2).
        data = two_product_dataset([-0.5, 0.0], [0.3, 0.0])
        ev = CriterionEvaluator(
            data, StubGamma([0.2, -0.1]), smoother="adjusted-cdf",
            pairs=[PeriodPair(0, 1)],
        )
        got = criterion_value(ev, np.array([1.0, 0.0]))
        assert abs(got - adjusted_cdf_oracle(0.2)) <= 1e-12

    def test_positive_part_hand_example(self):
        data = two_product_dataset([-0.5, 0.0], [0.3, 0.0])
        ev = CriterionEvaluator(
            data, StubGamma([0.2, -0.1]), smoother="positive-part",
            pairs=[PeriodPair(0, 1)],
        )
        assert abs(criterion_value(ev, np.array([1.0, 0.0])) - 0.2) <= 1e-15

    def test_both_orderings_add_reverse_term(self):
        data = two_product_dataset([-0.5, 0.0], [0.3, 0.0])
        ev = CriterionEvaluator(
            data, StubGamma([0.2, -0.1]), smoother="positive-part",
        )
        # Reverse ordering flips differences to (-0.2, 0.1) and the
        # covariate diffs to (0.5, -0.3): product 1's restriction binds
        # with weight 0.1.
        assert abs(criterion_value(ev, np.array([1.0, 0.0])) - 0.3) <= 1e-15

    def test_all_restrictions_silent(self):
        # Product 0's index strictly rises, all others strictly fall:
        # no forbidden configuration for either ordering of the pair,
        # whatever the differences say.
        data = two_product_dataset([0.7, 0.0], [-0.4, 0.0])
        ev = CriterionEvaluator(data, StubGamma([0.9, 0.9]))
        beta = np.array([1.0, 0.0])
        assert criterion_value(ev, beta) == 0.0
        assert ev.max_term(beta) == 0.0


class TestCriterionProperties:
    def build(self, seed=0, n=300, j=3, t=3, d=3):
        cfg = DgpConfig(design="oracle-logit", n_agents=n, n_products=j,
                        n_periods=t, n_covariates=d, seed=seed)
        data, _ = simulate(cfg)
        return cfg, data, CriterionEvaluator(data, LogitOracle(cfg))

    def test_nonnegative_everywhere(self):
        _, _, ev = self.build()
        rng = np.random.default_rng(2)
        betas = rng.standard_normal((40, 3))
        assert np.all(ev.evaluate(betas) >= 0.0)

    def test_scale_invariance_exact(self):
        _, _, ev = self.build(seed=5)
        rng = np.random.default_rng(6)
        for _ in range(10):
            beta = rng.standard_normal(3)
            for c in (0.2, 3.0, 41.5):
                assert ev.evaluate(beta) == ev.evaluate(c * beta)

    def test_piecewise_constant_between_sign_flips(self):
        _, data, ev = self.build(seed=7, n=100, t=2)
        rng = np.random.default_rng(8)
        dx = data.covariates[:, :, 0, :] - data.covariates[:, :, 1, :]
        checked = 0
        while checked < 5:
            beta = rng.standard_normal(3)
            beta2 = beta + rng.standard_normal(3) * 1e-4
            if np.array_equal(np.sign(dx @ beta), np.sign(dx @ beta2)):
                assert ev.evaluate(beta) == ev.evaluate(beta2)
                checked += 1

    def test_kernel_agrees_with_reference(self):
        _, _, ev = self.build(seed=9, n=500, j=4, t=3, d=4)
        rng = np.random.default_rng(10)
        for _ in range(12):
            beta = rng.standard_normal(4)
            fast = criterion_value(ev, beta)
            slow = criterion_value_reference(ev, beta)
            assert abs(fast - slow) <= 1e-12 * max(1.0, abs(slow))

    def test_exact_zero_at_truth_with_oracle(self):
        cfg, _, ev = self.build(seed=11, n=2000, t=2)
        beta0 = cfg.beta_direction
        assert criterion_value(ev, beta0) == 0.0
        assert ev.max_term(beta0) == 0.0

    def test_ordered_pair_and_product_inclusion(self):
        cfg, data, _ = self.build(seed=12, n=200, t=3)
        oracle = LogitOracle(cfg)
        full = CriterionEvaluator(data, oracle)
        parts = [
            CriterionEvaluator(data, oracle, pairs=[PeriodPair(t, s)], products=[j])
            for t in range(3) for s in range(3) if t != s
            for j in range(3)
        ]
        rng = np.random.default_rng(13)
        beta = rng.standard_normal(3)
        total = sum(criterion_value(p, beta) for p in parts)
        assert abs(total - criterion_value(full, beta)) <= 1e-12


class TestSubsetCriterion:
    def test_singleton_matches_per_product_terms(self):
        cfg = DgpConfig(design="oracle-logit", n_agents=150, seed=21)
        data, _ = simulate(cfg)
        oracle = LogitOracle(cfg)
        full = CriterionEvaluator(data, oracle)
        rng = np.random.default_rng(22)
        beta = rng.standard_normal(3)
        for j in range(3):
            only_j = CriterionEvaluator(data, oracle, products=[j])
            assert abs(
                subset_criterion_value(full, beta, [j]) - criterion_value(only_j, beta)
            ) <= 1e-12

    def test_not_part_of_default_aggregate(self):
        cfg = DgpConfig(design="oracle-logit", n_agents=100, seed=23)
        data, _ = simulate(cfg)
        ev = CriterionEvaluator(data, LogitOracle(cfg))
        beta = np.array([0.2, -0.9, 0.4])
        per_product = sum(
            subset_criterion_value(ev, beta, [j]) for j in range(3)
        )
        assert abs(per_product - criterion_value(ev, beta)) <= 1e-12
        # pair subsets add information beyond the default aggregate
        subset_value = subset_criterion_value(ev, beta, [0, 1])
        assert subset_value >= 0.0
