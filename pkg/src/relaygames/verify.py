"""Independent numerical oracles.

Everything here cross-checks a solver without sharing its code path:
brute-force simplex search for the optimal allocation, grid best-response
search against solved strategies, finite-difference audits of the model
assumptions, and an ODE-residual check of the symmetric equilibrium.
The only shared ingredients are raw cost/cdf evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .model import (
    Allocation,
    CostModel,
    Relay,
    Scenario,
    SourceModel,
    TypeDistribution,
)
from .pricing import asymmetric_ode_rhs, expected_profit

_GRID_CELL_LIMIT = 300_000_000
_STRICT_MARGIN = 1e-9
_FD_NOISE = 1e-7


def brute_force_allocation(scenario: Scenario, theta, resolution: float) -> Allocation:
    """Exhaustive simplex-grid minimizer of the total network cost.

    Enumerates every split of max_rate into multiples of resolution across
    the relays (plus the overflow link for an elastic source) and evaluates
    the cost of each; convexity puts the true optimum within one grid cell
    of the returned point.  Only raw cost evaluations are used, so this is
    a valid oracle for the equalization solver.
    """
    theta = scenario.check_theta(np.asarray(theta, dtype=float))
    if scenario.n > 4:
        raise DomainError("brute force supports at most four relays")
    r_s = scenario.max_rate
    if r_s == 0.0:
        return Allocation(0.0, (0.0,) * scenario.n)
    k = int(round(r_s / resolution))
    if k < 1 or abs(k * resolution - r_s) > 1e-9 * max(1.0, r_s):
        raise DomainError(f"resolution {resolution!r} does not divide max_rate {r_s!r}")
    dims = scenario.n + (1 if scenario.source.elastic else 0)
    if (k + 1) ** max(1, dims - 1) > _GRID_CELL_LIMIT:
        raise DomainError(
            f"grid of {dims} links at resolution {resolution!r} is too large; coarsen it"
        )

    counts = _compositions(k, dims)
    splits = counts * (r_s / k)
    if scenario.source.elastic:
        withheld = splits[:, 0]
        rates = splits[:, 1:]
    else:
        withheld = np.zeros(len(splits))
        rates = splits

    cost = np.zeros(len(splits))
    for j, relay in enumerate(scenario.relays):
        cost += np.asarray(relay.cost.evaluate(theta[j], rates[:, j]))
    if scenario.source.elastic:
        cost += np.asarray(scenario.source.overflow_cost(withheld))
    best = int(np.argmin(cost))
    return Allocation(float(withheld[best]), tuple(rates[best]))


def _compositions(k: int, dims: int) -> np.ndarray:
    """All nonnegative integer vectors of length dims summing to k."""
    if dims == 1:
        return np.array([[float(k)]])
    if dims == 2:
        first = np.arange(k + 1, dtype=float)
        return np.column_stack([first, k - first])
    blocks = []
    for first in range(k + 1):
        tail = _compositions(k - first, dims - 1)
        head = np.full((len(tail), 1), float(first))
        blocks.append(np.hstack([head, tail]))
    return np.vstack(blocks)


def best_response_gain(
    scenario: Scenario, strategies, relay: int, theta_i: float, price_grid
) -> float:
    """Largest expected-profit improvement over the strategy price on a grid.

    Uses the analytic product-of-cdfs profit only, never the equilibrium
    solvers it audits.  Zero (up to grid spacing) certifies a best response.
    """
    prices = np.asarray(price_grid, dtype=float)
    at_strategy = expected_profit(
        scenario, relay, theta_i, float(strategies[relay].price(theta_i)), strategies
    )
    on_grid = expected_profit(scenario, relay, theta_i, prices, strategies)
    return float(max(0.0, np.max(on_grid) - at_strategy))


@dataclass(frozen=True)
class AuditFinding:
    check: str
    location: tuple[float, float]
    magnitude: float

    @property
    def passed(self) -> bool:
        return self.magnitude <= 0.0


@dataclass(frozen=True)
class AuditReport:
    """Worst finite-difference violation per modelling assumption."""

    findings: tuple[AuditFinding, ...]
    passed: bool

    def finding(self, check: str) -> AuditFinding:
        for f in self.findings:
            if f.check == check:
                return f
        raise KeyError(check)


def assumption_audit(cost, dist, r_s: float, grid: tuple[int, int] = (24, 24)) -> AuditReport:
    """Finite-difference verification of the cost/distribution assumptions.

    On a type x rate grid (at least 20 x 20): zero cost at zero rate,
    strictly increasing and strictly convex cost in the rate, strictly
    decreasing cost in the type (at positive rates), nonpositive cross
    partial, and positive density on the interior of the support.
    Violations are reported, never raised; cost objects are duck-typed so
    adversarial models can be audited too.
    """
    n_t, n_r = grid
    if n_t < 20 or n_r < 20:
        raise DomainError("audit grid must be at least 20 x 20")
    lo, hi = dist.support
    pad = 1e-6 * (hi - lo)
    thetas = np.linspace(lo + pad, hi - pad, n_t)
    rates = np.linspace(r_s / n_r, r_s, n_r)

    def c(t, r):
        return np.asarray(cost.evaluate(t, r), dtype=float)

    tt, rr = np.meshgrid(thetas, rates, indexing="ij")
    h_r = min(1e-5 * max(r_s, 1e-6), float(rates[0]) / 2.0)
    h_t = 1e-5 * np.maximum(np.abs(tt), 1e-6)

    zero_rate = np.abs(c(thetas, np.zeros(n_t)))
    d_rate = (c(tt, rr + h_r) - c(tt, rr - h_r)) / (2.0 * h_r)
    curvature = (c(tt, rr + h_r) - 2.0 * c(tt, rr) + c(tt, rr - h_r)) / h_r**2
    d_type = (c(tt + h_t, rr) - c(tt - h_t, rr)) / (2.0 * h_t)
    cross = (
        c(tt + h_t, rr + h_r)
        - c(tt + h_t, rr - h_r)
        - c(tt - h_t, rr + h_r)
        + c(tt - h_t, rr - h_r)
    ) / (4.0 * h_t * h_r)
    interior = np.linspace(lo + pad, hi - pad, max(n_t, 50))
    density = np.asarray(dist.pdf(interior), dtype=float)

    findings = (
        _worst_1d("zero_cost_at_zero_rate", zero_rate - 1e-12, thetas),
        _worst_2d("cost_increasing_in_rate", _STRICT_MARGIN - d_rate, tt, rr),
        _worst_2d("cost_convex_in_rate", _STRICT_MARGIN - curvature, tt, rr),
        _worst_2d("cost_decreasing_in_type", d_type + _STRICT_MARGIN, tt, rr),
        _worst_2d("cross_partial_nonpositive", cross - _FD_NOISE, tt, rr),
        _worst_1d("density_positive_inside", 1e-15 - density, interior),
    )
    return AuditReport(findings, passed=all(f.passed for f in findings))


def _worst_1d(check, violation, axis) -> AuditFinding:
    idx = int(np.argmax(violation))
    return AuditFinding(check, (float(axis[idx]), 0.0), float(max(0.0, violation[idx])))


def _worst_2d(check, violation, tt, rr) -> AuditFinding:
    idx = np.unravel_index(np.argmax(violation), violation.shape)
    return AuditFinding(
        check, (float(tt[idx]), float(rr[idx])), float(max(0.0, violation[idx]))
    )


def ode_residual(
    strategy,
    cost: CostModel,
    dist: TypeDistribution,
    n: int,
    r_s: float,
    grid_size: int = 801,
) -> float:
    """Sup-norm mismatch between a symmetric strategy and the equilibrium ODE.

    Differentiates the tabulated price map numerically, converts to dw/dp,
    and compares with the analytic right-hand side with every component tied
    to the same type.  The outer 1% of the support is excluded on each side,
    where the numerical derivative degrades.
    """
    if n < 2:
        raise DomainError("the equilibrium ODE is defined for n >= 2 relays")
    scenario = Scenario(
        SourceModel("inelastic", r_s), (Relay(cost, dist),) * n
    )
    thetas, prices = strategy.table(grid_size)
    with np.errstate(divide="ignore", invalid="ignore"):
        dw_dp = 1.0 / np.gradient(prices, thetas)
    lo, hi = dist.support
    band = 0.01 * (hi - lo)
    mask = (thetas >= lo + band) & (thetas <= hi - band)
    worst = 0.0
    for theta, p, numeric in zip(thetas[mask], prices[mask], dw_dp[mask]):
        analytic = asymmetric_ode_rhs(p, np.full(n, theta), scenario)[0]
        worst = max(worst, abs(numeric - analytic))
    return worst
