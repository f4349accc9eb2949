"""Socially optimal traffic allocation via marginal-cost equalization.

The total network cost is strictly convex, so the optimum is the unique
feasible point where every active link (each relay, plus the virtual
overflow link of an elastic source) has the same marginal cost c_star and
every inactive link has a marginal cost at zero traffic of at least c_star.

The solver bisects on c_star (outer loop) and inverts each strictly
increasing marginal by bisection (inner loop).  Both loops are vectorized
over a batch of type vectors; the scalar API is the batch of size one.
The same equalization core is reused by the bargaining module, which passes
virtual-cost marginals and, where the family allows it, analytic inverses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConvergenceError, DomainError
from .model import Allocation, Scenario

INNER_TOL = 1e-10
OUTER_TOL = 1e-8
MAX_OUTER = 200
ACTIVITY_EPS = 1e-11


@dataclass(frozen=True)
class OptimalityCertificate:
    """Evidence that an allocation satisfies the equal-marginal conditions."""

    c_star: float
    residual: float
    active: tuple[int, ...]
    withheld_active: bool = False


@dataclass(frozen=True)
class _Link:
    """One strictly-increasing marginal cost curve, vectorized over a batch."""

    marginal: Callable[[np.ndarray], np.ndarray]  # rate array -> marginal array
    invert: Callable[[np.ndarray], np.ndarray]  # level array -> rate array


def bisection_inverter(
    marginal: Callable[[np.ndarray], np.ndarray], r_cap: float, tol: float = INNER_TOL
) -> Callable[[np.ndarray], np.ndarray]:
    """Invert a strictly increasing marginal on [0, r_cap] by bisection."""
    steps = max(1, min(90, int(math.ceil(math.log2(max(r_cap / tol, 2.0))))))

    def invert(level: np.ndarray) -> np.ndarray:
        at_zero = marginal(np.zeros_like(level))
        at_cap = marginal(np.full_like(level, r_cap))
        lo = np.zeros_like(level)
        hi = np.full_like(level, r_cap)
        for _ in range(steps):
            mid = 0.5 * (lo + hi)
            below = marginal(mid) < level
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        out = 0.5 * (lo + hi)
        out = np.where(at_zero >= level, 0.0, out)
        return np.where(at_cap <= level, r_cap, out)

    return invert


def equalize_marginals(
    links: Sequence[_Link],
    r_total: float,
    batch: int,
    outer_tol: float = OUTER_TOL,
    max_outer: int = MAX_OUTER,
    bracket: tuple[float, float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Split r_total across links so all active marginals share one level.

    Returns (rates, c_star) with rates of shape (batch, len(links)).
    """
    if r_total == 0.0:
        rates = np.zeros((batch, len(links)))
        level = np.min([lk.marginal(np.zeros(batch)) for lk in links], axis=0)
        return rates, level

    zero = np.zeros(batch)
    cap = np.full(batch, r_total)
    at_zero = np.stack([lk.marginal(zero) for lk in links])
    at_cap = np.stack([lk.marginal(cap) for lk in links])
    if bracket is None:
        lo = at_zero.min(axis=0)
        lo = lo - np.maximum(1e-9 * np.abs(lo), 1e-12)
        hi = at_cap.max(axis=0)
        hi = hi + np.maximum(1e-9 * np.abs(hi), 1e-12)
    else:
        lo = np.full(batch, float(bracket[0]))
        hi = np.full(batch, float(bracket[1]))

    width = float(np.max(hi - lo))
    if not np.isfinite(width) or width <= 0:
        raise ConvergenceError(f"degenerate c_star bracket of width {width!r}")
    steps = int(math.ceil(math.log2(max(width / outer_tol, 2.0))))
    if steps > max_outer:
        raise ConvergenceError(
            f"c_star bisection needs {steps} iterations for bracket width "
            f"{width:.3g} at tolerance {outer_tol:g} (cap {max_outer})"
        )

    def total_at(level):
        return sum(lk.invert(level) for lk in links)

    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        short = total_at(mid) < r_total
        lo = np.where(short, mid, lo)
        hi = np.where(short, hi, mid)
    c_star = 0.5 * (lo + hi)

    rates = np.stack([lk.invert(c_star) for lk in links], axis=1)
    # Close the (tiny) feasibility gap left by the finite bracket, spreading
    # it over active links in proportion to their rates.
    total = rates.sum(axis=1)
    gap = r_total - total
    scale = np.where(total > 0.0, 1.0 + gap / np.where(total > 0.0, total, 1.0), 1.0)
    rates = rates * scale[:, None]
    if np.any(np.abs(rates.sum(axis=1) - r_total) > 1e-9 * max(1.0, r_total)):
        raise ConvergenceError(
            "marginal equalization left an infeasible split",
            trace=[float(np.max(np.abs(rates.sum(axis=1) - r_total)))],
        )
    return rates, c_star


def relay_links(scenario: Scenario, theta: np.ndarray) -> list[_Link]:
    """Bisection-inverted marginal-cost links for each relay at fixed types."""
    r_s = scenario.max_rate
    links = []
    for k, relay in enumerate(scenario.relays):
        col = theta[:, k]
        marginal = lambda r, c=relay.cost, t=col: np.asarray(c.marginal(t, r))
        links.append(_Link(marginal, bisection_inverter(marginal, r_s)))
    return links


def overflow_link(scenario: Scenario, batch: int) -> _Link:
    src = scenario.source
    marginal = lambda r: np.broadcast_to(
        np.asarray(src.overflow_marginal(r)), (batch,)
    ).astype(float)
    return _Link(marginal, bisection_inverter(marginal, scenario.max_rate))


def solve_social_optimum_batch(
    scenario: Scenario, theta: np.ndarray, bracket=None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized optimum for a (batch, n) matrix of type vectors.

    Returns (withheld, rates, c_star) with shapes (batch,), (batch, n), (batch,).
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    scenario.check_theta(theta)
    batch = theta.shape[0]
    links = relay_links(scenario, theta)
    if scenario.source.elastic:
        links = [overflow_link(scenario, batch)] + links
    rates, c_star = equalize_marginals(
        links, scenario.max_rate, batch, bracket=bracket
    )
    if scenario.source.elastic:
        return rates[:, 0], rates[:, 1:], c_star
    return np.zeros(batch), rates, c_star


def solve_social_optimum(
    scenario: Scenario, theta, bracket=None
) -> tuple[Allocation, OptimalityCertificate]:
    """Unique total-cost-minimizing allocation plus its optimality evidence."""
    theta = np.asarray(theta, dtype=float).reshape(1, -1)
    withheld, rates, c_star = solve_social_optimum_batch(scenario, theta, bracket)
    allocation = Allocation(float(withheld[0]), tuple(rates[0]))
    residual = kkt_residual(scenario, theta[0], allocation)
    active = tuple(
        k for k, r in enumerate(allocation.rates) if r > ACTIVITY_EPS * max(1.0, scenario.max_rate)
    )
    cert = OptimalityCertificate(
        c_star=float(c_star[0]),
        residual=residual,
        active=active,
        withheld_active=allocation.withheld > ACTIVITY_EPS * max(1.0, scenario.max_rate),
    )
    return allocation, cert


def total_cost_batch(
    scenario: Scenario, theta: np.ndarray, withheld: np.ndarray, rates: np.ndarray
) -> np.ndarray:
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    rates = np.atleast_2d(np.asarray(rates, dtype=float))
    cost = np.zeros(rates.shape[0])
    for k, relay in enumerate(scenario.relays):
        cost += np.asarray(relay.cost.evaluate(theta[:, k], rates[:, k]))
    if scenario.source.elastic:
        cost += np.asarray(scenario.source.overflow_cost(withheld))
    return cost


def total_cost(scenario: Scenario, theta, allocation: Allocation) -> float:
    """Sum of link costs (plus overflow loss for an elastic source)."""
    theta = scenario.check_theta(np.asarray(theta, dtype=float))
    allocation.validate(scenario)
    value = total_cost_batch(
        scenario,
        theta.reshape(1, -1),
        np.asarray([allocation.withheld]),
        allocation.as_array().reshape(1, -1),
    )
    return float(value[0])


def kkt_residual(scenario: Scenario, theta, allocation: Allocation) -> float:
    """Distance of an allocation from the equal-marginal optimality conditions.

    Max deviation of active-link marginals from their median, plus the worst
    shortfall of inactive links' marginal-at-zero below that median.  Zero
    exactly at the optimum.
    """
    theta = scenario.check_theta(np.asarray(theta, dtype=float))
    allocation.validate(scenario)
    eps = ACTIVITY_EPS * max(1.0, scenario.max_rate)

    active_marginals = []
    inactive_at_zero = []
    for k, relay in enumerate(scenario.relays):
        rate = allocation.rates[k]
        if rate > eps:
            active_marginals.append(float(relay.cost.marginal(theta[k], rate)))
        else:
            inactive_at_zero.append(float(relay.cost.marginal(theta[k], 0.0)))
    if scenario.source.elastic:
        if allocation.withheld > eps:
            active_marginals.append(
                float(scenario.source.overflow_marginal(allocation.withheld))
            )
        else:
            inactive_at_zero.append(float(scenario.source.overflow_marginal(0.0)))

    if not active_marginals:
        return 0.0
    med = float(np.median(active_marginals))
    spread = max(abs(c - med) for c in active_marginals)
    shortfall = max((max(0.0, med - c0) for c0 in inactive_at_zero), default=0.0)
    return spread + shortfall
