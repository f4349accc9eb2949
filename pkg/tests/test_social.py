"""Social-optimum solver tests, cross-checked against the brute-force oracle."""

import math

import numpy as np
import pytest

from relaygames import (
    Allocation,
    CostModel,
    DomainError,
    Relay,
    Scenario,
    SourceModel,
    TypeDistribution,
)
from relaygames.social import (
    kkt_residual,
    solve_social_optimum,
    solve_social_optimum_batch,
    total_cost,
)
from relaygames.verify import brute_force_allocation

UNIT = TypeDistribution("uniform", 0.5, 2.5)


def scenario_of(families, r_s=1.0, mode="inelastic", theta_s=None, dist=UNIT):
    relays = tuple(Relay(CostModel(f), dist) for f in families)
    return Scenario(SourceModel(mode, r_s, theta=theta_s), relays)


class TestSolveSocialOptimum:
    def test_symmetric_two_relays_split_equally(self):
        s = scenario_of(["power_exp", "power_exp"])
        alloc, cert = solve_social_optimum(s, (1.5, 1.5))
        assert alloc.rates[0] == pytest.approx(alloc.rates[1], abs=1e-12)
        assert alloc.total == pytest.approx(1.0, abs=1e-12)
        assert cert.residual <= 1e-8

    def test_single_relay_carries_everything(self):
        s = scenario_of(["exp_over_theta"])
        alloc, cert = solve_social_optimum(s, (1.0,))
        assert alloc.rates == (1.0,)
        # One active link: the common marginal is its marginal at full load.
        assert cert.c_star == pytest.approx(math.e / 1.0, rel=1e-8)

    def test_matches_brute_force_on_power_exp_pair(self):
        s = scenario_of(["power_exp", "power_exp"])
        theta = (1.0, 2.0)
        alloc, _ = solve_social_optimum(s, theta)
        oracle = brute_force_allocation(s, theta, resolution=1e-4)
        np.testing.assert_allclose(alloc.rates, oracle.rates, atol=1e-3)

    def test_matches_brute_force_across_random_scenarios(self):
        rng = np.random.default_rng(2024)
        families = ["power_exp", "exp_over_theta", "quadratic_over_theta"]
        for trial in range(12):
            n = int(rng.integers(1, 4))
            fams = [families[int(rng.integers(0, 3))] for _ in range(n)]
            elastic = trial % 3 == 0
            s = scenario_of(
                fams,
                mode="elastic" if elastic else "inelastic",
                theta_s=2.0 if elastic else None,
            )
            theta = rng.uniform(0.6, 2.4, n)
            alloc, cert = solve_social_optimum(s, theta)
            oracle = brute_force_allocation(s, theta, resolution=1e-3)
            assert total_cost(s, theta, alloc) <= total_cost(s, theta, oracle) + 1e-9
            assert abs(total_cost(s, theta, alloc) - total_cost(s, theta, oracle)) < 1e-3
            assert cert.residual <= 1e-8

    def test_uniqueness_across_bracket_choices(self):
        s = scenario_of(["exp_over_theta", "quadratic_over_theta", "power_exp"])
        theta = (0.8, 1.4, 2.2)
        a1, _ = solve_social_optimum(s, theta)
        a2, _ = solve_social_optimum(s, theta, bracket=(1e-4, 50.0))
        np.testing.assert_allclose(a1.rates, a2.rates, atol=1e-7)

    def test_elastic_overflow_marginal_matches_c_star(self):
        s = scenario_of(["power_exp"], mode="elastic", theta_s=3.0)
        alloc, cert = solve_social_optimum(s, (0.6,))
        assert alloc.withheld > 0
        overflow_marginal = float(s.source.overflow_marginal(alloc.withheld))
        assert overflow_marginal == pytest.approx(cert.c_star, abs=1e-7)

    def test_theta_out_of_support_rejected(self):
        s = scenario_of(["power_exp"])
        with pytest.raises(DomainError):
            solve_social_optimum(s, (5.0,))

    def test_batch_agrees_with_scalar(self):
        s = scenario_of(["power_exp", "exp_over_theta"])
        thetas = np.array([[1.0, 2.0], [0.7, 0.9], [2.4, 0.6]])
        withheld, rates, c_star = solve_social_optimum_batch(s, thetas)
        for row in range(3):
            alloc, cert = solve_social_optimum(s, thetas[row])
            np.testing.assert_allclose(rates[row], alloc.rates, atol=1e-10)
            assert c_star[row] == pytest.approx(cert.c_star, abs=1e-8)

    def test_mm1_capacity_respected(self):
        caps = TypeDistribution("uniform", 2.0, 4.0)
        s = Scenario(
            SourceModel("inelastic", 1.0),
            (Relay(CostModel("mm1_delay"), caps), Relay(CostModel("mm1_delay"), caps)),
        )
        alloc, cert = solve_social_optimum(s, (2.5, 3.5))
        assert cert.residual <= 1e-8
        assert alloc.rates[1] > alloc.rates[0]  # bigger capacity takes more


class TestTotalCost:
    def test_zero_rate_edge_scenario(self):
        s = scenario_of(["power_exp", "power_exp"], r_s=0.0)
        assert total_cost(s, (1.0, 1.0), Allocation(0.0, (0.0, 0.0))) == 0.0

    def test_single_relay_full_load(self):
        s = scenario_of(["power_exp"])
        assert total_cost(s, (1.0,), Allocation(0.0, (1.0,))) == pytest.approx(1.0)

    def test_two_relay_sum(self):
        s = scenario_of(["exp_over_theta", "exp_over_theta"])
        value = total_cost(s, (1.0, 2.0), Allocation(0.0, (0.4, 0.6)))
        expected = (math.exp(0.4) - 1.0) + (math.exp(0.6) - 1.0) / 2.0
        assert value == pytest.approx(expected, rel=1e-12)

    def test_infeasible_allocation_rejected(self):
        s = scenario_of(["power_exp", "power_exp"])
        with pytest.raises(DomainError):
            total_cost(s, (1.0, 1.0), Allocation(0.0, (0.2, 0.2)))


class TestKktResidual:
    def test_solver_output_certified(self):
        s = scenario_of(["power_exp", "exp_over_theta"])
        theta = (1.1, 1.9)
        alloc, _ = solve_social_optimum(s, theta)
        assert kkt_residual(s, theta, alloc) <= 1e-8

    def test_lopsided_split_is_flagged(self):
        s = scenario_of(["power_exp", "power_exp"])
        residual = kkt_residual(s, (1.5, 1.5), Allocation(0.0, (1.0, 0.0)))
        assert residual > 0.1

    def test_residual_grows_with_perturbation(self):
        s = scenario_of(["exp_over_theta", "exp_over_theta"])
        theta = (1.0, 2.0)
        alloc, _ = solve_social_optimum(s, theta)
        base = np.asarray(alloc.rates)
        residuals = []
        for delta in np.linspace(0.0, 0.3, 10):
            shifted = base + np.array([delta, -delta])
            residuals.append(kkt_residual(s, theta, Allocation(0.0, tuple(shifted))))
        assert all(b >= a - 1e-12 for a, b in zip(residuals, residuals[1:]))
        assert residuals[-1] > residuals[0]


class TestBruteForce:
    def test_symmetric_pair_splits_equally(self):
        s = scenario_of(["quadratic_over_theta", "quadratic_over_theta"])
        oracle = brute_force_allocation(s, (1.0, 1.0), resolution=0.01)
        assert abs(oracle.rates[0] - oracle.rates[1]) <= 0.01 + 1e-12

    def test_single_relay(self):
        s = scenario_of(["power_exp"])
        assert brute_force_allocation(s, (1.0,), 0.01).rates == (1.0,)

    def test_rejects_oversized_problems(self):
        s = scenario_of(["power_exp"] * 5)
        with pytest.raises(DomainError):
            brute_force_allocation(s, (1.0,) * 5, 0.1)

    def test_rejects_non_dividing_resolution(self):
        s = scenario_of(["power_exp"])
        with pytest.raises(DomainError):
            brute_force_allocation(s, (1.0,), 0.3)
