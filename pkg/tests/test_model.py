"""Domain-type tests: cost families, distributions, sampling, strategies."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relaygames import (
    Allocation,
    CostModel,
    DomainError,
    Outcome,
    PricingStrategy,
    Relay,
    Scenario,
    SourceModel,
    TypeDistribution,
    cost_eval,
    marginal_eval,
    sample_types,
)

ALL_FAMILIES = ("power_exp", "exp_over_theta", "quadratic_over_theta", "mm1_delay")


def _fd(fn, x, h):
    return (fn(x + h) - fn(x - h)) / (2.0 * h)


def _theta_rate_grid(family, rng, size=100):
    # mm1_delay types are capacities; keep rates strictly below them.
    if family == "mm1_delay":
        thetas = rng.uniform(2.0, 5.0, size)
        rates = rng.uniform(0.05, 1.0, size)
    else:
        thetas = rng.uniform(0.5, 3.0, size)
        rates = rng.uniform(0.05, 1.5, size)
    return thetas, rates


class TestCostFamilies:
    def test_power_exp_unit_values(self):
        m = CostModel("power_exp")
        assert cost_eval(m, 1.0, 1.0) == pytest.approx(1.0, abs=0)

    def test_zero_rate_costs_nothing(self):
        for family in ALL_FAMILIES:
            m = CostModel(family)
            assert cost_eval(m, 1.7, 0.0) == 0.0

    def test_exp_over_theta_value(self):
        m = CostModel("exp_over_theta")
        assert cost_eval(m, 2.0, 1.0) == pytest.approx((math.e - 1.0) / 2.0, rel=1e-15)

    def test_marginal_values(self):
        assert marginal_eval(CostModel("quadratic_over_theta"), 2.0, 1.0) == pytest.approx(0.5)
        assert marginal_eval(CostModel("power_exp"), 1.0, 0.0) == pytest.approx(math.log(2.0))
        assert marginal_eval(CostModel("mm1_delay"), 2.0, 1.0) == pytest.approx(2.0)

    def test_marginal_matches_finite_difference(self):
        # Analytic dC/dr against a centered difference of the cost itself.
        rng = np.random.default_rng(7)
        for family in ALL_FAMILIES:
            m = CostModel(family)
            thetas, rates = _theta_rate_grid(family, rng)
            for theta, rate in zip(thetas, rates):
                fd = _fd(lambda r: cost_eval(m, theta, r), rate, 1e-6 * max(1.0, rate))
                assert marginal_eval(m, theta, rate) == pytest.approx(fd, rel=1e-6)

    def test_all_derivatives_match_finite_differences(self):
        rng = np.random.default_rng(11)
        for family in ALL_FAMILIES:
            m = CostModel(family)
            thetas, rates = _theta_rate_grid(family, rng)
            for theta, rate in zip(thetas, rates):
                h_t = 1e-5 * theta
                h_r = 1e-5 * max(0.1, rate)
                dtheta = _fd(lambda t: float(m.evaluate(t, rate)), theta, h_t)
                assert float(m.theta_derivative(theta, rate)) == pytest.approx(
                    dtheta, rel=1e-5, abs=1e-10
                )
                cross = _fd(lambda t: float(m.marginal(t, rate)), theta, h_t)
                assert float(m.cross_derivative(theta, rate)) == pytest.approx(
                    cross, rel=1e-5, abs=1e-10
                )
                curv = _fd(lambda r: float(m.marginal(theta, r)), rate, h_r)
                assert float(m.rate_curvature(theta, rate)) == pytest.approx(
                    curv, rel=1e-5, abs=1e-10
                )

    def test_sign_assumptions_on_domain(self):
        rng = np.random.default_rng(13)
        for family in ALL_FAMILIES:
            m = CostModel(family)
            thetas, rates = _theta_rate_grid(family, rng)
            assert np.all(m.marginal(thetas, rates) > 0)
            assert np.all(m.rate_curvature(thetas, rates) > 0)
            assert np.all(m.theta_derivative(thetas, rates) < 0)
            assert np.all(m.cross_derivative(thetas, rates) <= 0)

    def test_domain_errors_name_offender(self):
        m = CostModel("power_exp")
        with pytest.raises(DomainError, match="theta"):
            cost_eval(m, -1.0, 0.5)
        with pytest.raises(DomainError, match="rate"):
            cost_eval(m, 1.0, -0.5)
        with pytest.raises(DomainError, match="capacity"):
            cost_eval(CostModel("mm1_delay"), 2.0, 2.0)

    def test_unknown_family_rejected(self):
        with pytest.raises(DomainError):
            CostModel("cubic")

    @given(
        rate=st.floats(0.0, 2.0),
        theta=st.floats(0.2, 5.0),
        bump=st.floats(1e-3, 1.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_cost_monotone_in_rate_and_type(self, rate, theta, bump):
        m = CostModel("exp_over_theta")
        assert cost_eval(m, theta, rate + bump) > cost_eval(m, theta, rate)
        if rate > 0:
            assert cost_eval(m, theta + bump, rate) < cost_eval(m, theta, rate)


class TestTypeDistribution:
    def test_uniform_cdf_pdf(self):
        d = TypeDistribution("uniform", 1.0, 3.0)
        assert float(d.cdf(1.0)) == 0.0
        assert float(d.cdf(3.0)) == 1.0
        assert float(d.cdf(2.0)) == pytest.approx(0.5)
        assert float(d.pdf(2.0)) == pytest.approx(0.5)

    def test_power_cdf_round_trip(self):
        d = TypeDistribution("power_cdf", 0.0, 1.0, gamma=2.0)
        u = np.linspace(0.01, 0.99, 23)
        np.testing.assert_allclose(d.cdf(d.ppf(u)), u, atol=1e-12)

    def test_density_positive_inside(self):
        for d in (
            TypeDistribution("uniform", 0.0, 1.0),
            TypeDistribution("power_cdf", 0.0, 1.0, gamma=0.5),
            TypeDistribution("power_cdf", 1.0, 2.0, gamma=3.0),
        ):
            grid = np.linspace(d.lo + 1e-6, d.hi - 1e-6, 101)
            assert np.all(d.pdf(grid) > 0)
            assert np.all(np.diff(d.cdf(grid)) > 0)

    def test_validation(self):
        with pytest.raises(DomainError):
            TypeDistribution("uniform", 2.0, 1.0)
        with pytest.raises(DomainError):
            TypeDistribution("power_cdf", 0.0, 1.0, gamma=-1.0)
        with pytest.raises(DomainError):
            TypeDistribution("uniform", 0.0, 1.0, gamma=2.0)


class TestSampling:
    def _scenario(self, dist):
        relay = Relay(CostModel("exp_over_theta"), dist)
        return Scenario(SourceModel("inelastic", 1.0), (relay, relay))

    def test_deterministic_given_seed(self):
        s = self._scenario(TypeDistribution("uniform", 0.0, 1.0))
        a = sample_types(s, 2, seed=123)
        b = sample_types(s, 2, seed=123)
        np.testing.assert_array_equal(a, b)

    def test_support_containment(self):
        s = self._scenario(TypeDistribution("uniform", 1.0, 2.0))
        draws = sample_types(s, 500, seed=5)
        assert draws.shape == (500, 2)
        assert np.all((draws >= 1.0) & (draws <= 2.0))

    def test_power_cdf_matches_analytic_law(self):
        # Kolmogorov-Smirnov distance of the empirical CDF from the analytic
        # one; the sup over sample points bounds the sup over the support.
        dist = TypeDistribution("power_cdf", 0.0, 1.0, gamma=2.0)
        s = self._scenario(dist)
        draws = np.sort(sample_types(s, 100_000, seed=99)[:, 0])
        k = draws.size
        grid = dist.cdf(draws)
        upper = np.max(np.arange(1, k + 1) / k - grid)
        lower = np.max(grid - np.arange(0, k) / k)
        assert max(upper, lower) < 0.01


class TestContainers:
    def test_allocation_feasibility(self):
        s = Scenario(
            SourceModel("inelastic", 1.0),
            (Relay(CostModel("power_exp"), TypeDistribution("uniform", 1.0, 2.0)),) * 2,
        )
        Allocation(0.0, (0.5, 0.5)).validate(s)
        with pytest.raises(DomainError):
            Allocation(0.0, (0.5, 0.4)).validate(s)
        with pytest.raises(DomainError):
            Allocation(0.1, (0.5, 0.4)).validate(s)  # inelastic cannot withhold
        with pytest.raises(DomainError):
            Allocation(0.0, (-0.1, 1.1))

    def test_elastic_allows_withholding(self):
        s = Scenario(
            SourceModel("elastic", 1.0, theta=2.0),
            (Relay(CostModel("power_exp"), TypeDistribution("uniform", 1.0, 2.0)),),
        )
        Allocation(0.25, (0.75,)).validate(s)

    def test_outcome_transfers_nonnegative(self):
        a = Allocation(0.0, (1.0,))
        Outcome(a, (0.0,))
        with pytest.raises(DomainError):
            Outcome(a, (-0.01,))

    def test_scenario_guards(self):
        relay = Relay(CostModel("mm1_delay"), TypeDistribution("uniform", 2.0, 3.0))
        with pytest.raises(DomainError):
            Scenario(SourceModel("inelastic", 2.5), (relay,))
        Scenario(SourceModel("inelastic", 1.5), (relay,))
        with pytest.raises(DomainError):
            Scenario(SourceModel("inelastic", 1.0), ())

    def test_source_overflow_inversion(self):
        src = SourceModel("elastic", 1.0, theta=2.0)
        # Marginal at zero withholding is theta/(1+max_rate).
        assert float(src.overflow_marginal(0.0)) == pytest.approx(1.0)
        for p in (1.2, 1.5, 1.9):
            r0 = float(src.overflow_marginal_inverse(p))
            assert 0.0 < r0 < 1.0
            assert float(src.overflow_marginal(r0)) == pytest.approx(p, abs=1e-12)
        assert float(src.overflow_marginal_inverse(0.5)) == 0.0
        assert float(src.overflow_marginal_inverse(1e9)) == 1.0
        assert float(src.overflow_cost(0.0)) == 0.0


class TestPricingStrategy:
    def test_tabulated_inverse_round_trip(self):
        thetas = np.linspace(1.0, 2.0, 41)
        prices = 1.0 / thetas
        strat = PricingStrategy.from_table(thetas, prices)
        spacing = thetas[1] - thetas[0]
        back = strat.inverse(strat.price(thetas))
        assert np.max(np.abs(back - thetas)) <= spacing

    def test_tabulated_requires_strict_monotonicity(self):
        thetas = np.linspace(0.0, 1.0, 5)
        with pytest.raises(DomainError):
            PricingStrategy.from_table(thetas, np.ones(5))

    def test_callable_strategy_inverse(self):
        strat = PricingStrategy.from_callable(lambda t: 2.0 - t, (0.0, 1.0))
        grid = np.linspace(0.05, 0.95, 19)
        np.testing.assert_allclose(strat.inverse(strat.price(grid)), grid, atol=1e-12)
        # Out-of-range prices clamp to the support ends.
        assert float(strat.inverse(5.0)) == 0.0
        assert float(strat.inverse(0.1)) == 1.0

    def test_constant_strategy_semantics(self):
        strat = PricingStrategy.constant(0.7, (1.0, 2.0))
        assert strat.is_constant
        assert float(strat.price(1.3)) == 0.7
        assert float(strat.inverse(0.5)) == 2.0  # cheaper rival always wins
        assert float(strat.inverse(0.9)) == 1.0

    @given(scale=st.floats(0.1, 3.0), shift=st.floats(0.0, 2.0))
    @settings(max_examples=40, deadline=None)
    def test_interpolated_inverse_identity(self, scale, shift):
        thetas = np.linspace(0.5, 1.5, 33)
        prices = shift + scale * (2.0 - thetas) ** 2
        strat = PricingStrategy.from_table(thetas, prices)
        mid = np.linspace(prices[-1], prices[0], 17)
        np.testing.assert_allclose(strat.price(strat.inverse(mid)), mid, rtol=1e-9)
