"""Full-bargaining contracts: complete-information outcomes and the
incomplete-information screening mechanism.

With public types the source pays each relay exactly its cost and
implements the social optimum, leaving every relay zero utility.  With
private types the equilibrium outcomes coincide with the cost-minimizing
allocations of a complete-information game in which each relay's cost is
replaced by its virtual cost

    J(theta, r) = C(theta, r) - (1 - F(theta)) / f(theta) * dC/dtheta,

the hazard-weighted information rent added to the true cost.  Interim
transfers follow from the envelope formula anchored at zero profit for the
bottom type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .model import Allocation, CostModel, Outcome, Scenario, TypeDistribution
from .social import (
    _Link,
    bisection_inverter,
    equalize_marginals,
    overflow_link,
    solve_social_optimum,
    total_cost_batch,
)

_EDGE_INSET = 1e-9
_CONVEXITY_SLACK = -1e-9


@dataclass(frozen=True)
class VirtualCostView:
    """Virtual cost J and its rate marginal for one relay.

    Types at the bottom edge of the support (where the density may vanish)
    are evaluated a hair inside it; the edge carries no probability mass.
    At the top of the support the hazard term vanishes and J equals the
    true cost exactly.
    """

    cost: CostModel
    dist: TypeDistribution

    def _inset(self, theta):
        lo, hi = self.dist.support
        return np.clip(np.asarray(theta, dtype=float), lo + _EDGE_INSET * (hi - lo), hi)

    def hazard(self, theta):
        """(1 - F) / f at the (inset) type."""
        t = self._inset(theta)
        f = np.asarray(self.dist.pdf(t), dtype=float)
        with np.errstate(divide="ignore"):
            return (1.0 - np.asarray(self.dist.cdf(t))) / f

    def evaluate(self, theta, rate):
        t = self._inset(theta)
        return np.asarray(self.cost.evaluate(t, rate)) - self.hazard(t) * np.asarray(
            self.cost.theta_derivative(t, rate)
        )

    def rate_marginal(self, theta, rate):
        t = self._inset(theta)
        return np.asarray(self.cost.marginal(t, rate)) - self.hazard(t) * np.asarray(
            self.cost.cross_derivative(t, rate)
        )

    def rent(self, theta, rate):
        """X = J - C, the information-rent component."""
        t = self._inset(theta)
        return -self.hazard(t) * np.asarray(self.cost.theta_derivative(t, rate))

    def convex_in_rate(self, theta, r_s: float, points: int = 200) -> bool:
        """Second differences of J(theta, .) on a uniform rate grid."""
        rates = np.linspace(0.0, r_s, points)
        values = np.asarray(self.evaluate(theta, rates), dtype=float)
        return bool(np.all(np.diff(values, 2) >= _CONVEXITY_SLACK))


def virtual_cost(view: VirtualCostView, theta: float, rate: float) -> float:
    """J(theta, rate) for one relay; analytic in the built-in families."""
    lo, hi = view.dist.support
    if not lo <= theta <= hi:
        raise DomainError(f"theta={theta!r} outside support [{lo}, {hi}]")
    if rate < 0.0:
        raise DomainError(f"rate must be nonnegative, got {rate!r}")
    return float(view.evaluate(theta, rate))


def complete_info_contract(scenario: Scenario, theta) -> Outcome:
    """Zero-utility contract at the social optimum under public types."""
    allocation, _ = solve_social_optimum(scenario, theta)
    theta = np.asarray(theta, dtype=float)
    transfers = tuple(
        float(relay.cost.evaluate(theta[k], allocation.rates[k]))
        for k, relay in enumerate(scenario.relays)
    )
    return Outcome(allocation, transfers)


# ---------------------------------------------------------------------------
# Virtual allocation.
# ---------------------------------------------------------------------------


def _virtual_links(scenario: Scenario, theta: np.ndarray) -> list[_Link]:
    """Virtual-marginal links, with analytic inversion where separable.

    For the families whose marginal factors as rate_part(r) * theta_part(t),
    the virtual marginal is rate_part(r) * K with
    K = theta_part - hazard * theta_part', so the inner inversion is one
    closed-form evaluation; mm1_delay falls back to bisection.
    """
    r_s = scenario.max_rate
    links = []
    for k, relay in enumerate(scenario.relays):
        view = VirtualCostView(relay.cost, relay.dist)
        col = theta[:, k]
        if relay.cost.marginal_separable:
            t = view._inset(col)
            coeff = np.asarray(
                relay.cost.marginal_theta_part(t)
                - view.hazard(t) * relay.cost.marginal_theta_part_derivative(t)
            )
            links.append(_separable_link(relay.cost, coeff, r_s))
        else:
            marginal = lambda r, v=view, c=col: np.asarray(v.rate_marginal(c, r))
            links.append(_Link(marginal, bisection_inverter(marginal, r_s)))
    return links


def _separable_link(cost: CostModel, coeff: np.ndarray, r_s: float) -> _Link:
    def marginal(rate):
        return np.asarray(cost.marginal_rate_part(rate)) * coeff

    def invert(level):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            rate = np.asarray(
                cost.marginal_rate_part_inverse(np.maximum(level / coeff, 1e-300))
            )
        return np.clip(rate, 0.0, r_s)

    return _Link(marginal, invert)


def solve_virtual_allocation_batch(
    scenario: Scenario, theta: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimize overflow cost plus total virtual cost, vectorized over rows."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    scenario.check_theta(theta)
    batch = theta.shape[0]
    links = _virtual_links(scenario, theta)
    if scenario.source.elastic:
        links = [overflow_link(scenario, batch)] + links
    rates, level = equalize_marginals(links, scenario.max_rate, batch)
    if scenario.source.elastic:
        return rates[:, 0], rates[:, 1:], level
    return np.zeros(batch), rates, level


@dataclass(frozen=True)
class VirtualAllocationResult:
    """Virtual-cost minimizer plus uniqueness evidence.

    candidates holds every allocation the grid fallback found within
    tolerance of the minimum; it has one entry on the convex fast path.
    """

    allocation: Allocation
    residual: float
    convex: bool
    candidates: tuple[Allocation, ...]


def solve_virtual_allocation(scenario: Scenario, theta) -> Allocation:
    """Allocation realized by the truthful screening mechanism."""
    return solve_virtual_allocation_full(scenario, theta).allocation


def solve_virtual_allocation_full(scenario: Scenario, theta) -> VirtualAllocationResult:
    theta = scenario.check_theta(np.asarray(theta, dtype=float))
    views = [VirtualCostView(r.cost, r.dist) for r in scenario.relays]
    convex = all(
        view.convex_in_rate(theta[k], scenario.max_rate)
        for k, view in enumerate(views)
    )
    if convex:
        withheld, rates, _ = solve_virtual_allocation_batch(
            scenario, theta.reshape(1, -1)
        )
        allocation = Allocation(float(withheld[0]), tuple(rates[0]))
        residual = virtual_kkt_residual(scenario, theta, allocation)
        return VirtualAllocationResult(allocation, residual, True, (allocation,))

    candidates = _virtual_brute(scenario, theta)
    best = candidates[0]
    residual = virtual_kkt_residual(scenario, theta, best)
    return VirtualAllocationResult(best, residual, False, tuple(candidates))


def _virtual_total(scenario: Scenario, theta, withheld, rates) -> np.ndarray:
    views = [VirtualCostView(r.cost, r.dist) for r in scenario.relays]
    total = np.zeros(rates.shape[0])
    for k, view in enumerate(views):
        total += np.asarray(view.evaluate(theta[k], rates[:, k]))
    if scenario.source.elastic:
        total += np.asarray(scenario.source.overflow_cost(withheld))
    return total


def _virtual_brute(
    scenario: Scenario, theta: np.ndarray, rounds: int = 4
) -> list[Allocation]:
    """Box-refined grid search for non-convex virtual costs.

    The first dims-1 coordinates range over a shrinking box; the last one
    closes the simplex.  Near-ties on the final grid are all reported so
    callers can see multiplicity.
    """
    r_s = scenario.max_rate
    dims = scenario.n + (1 if scenario.source.elastic else 0)
    free = max(dims - 1, 1)
    points = {1: 241, 2: 61, 3: 31}.get(free, 17)
    lo_box = np.zeros(free)
    hi_box = np.full(free, r_s)

    splits = totals = None
    for _ in range(rounds):
        axes = [np.linspace(lo_box[d], hi_box[d], points) for d in range(free)]
        mesh = np.meshgrid(*axes, indexing="ij")
        head = np.column_stack([m.ravel() for m in mesh])
        if dims == 1:
            head = np.full((1, 0), 0.0)
        last = r_s - head.sum(axis=1) if dims > 1 else np.full(1, r_s)
        keep = last >= -1e-12
        head, last = head[keep], np.maximum(last[keep], 0.0)
        splits = np.column_stack([head, last])
        if scenario.source.elastic:
            withheld, rates = splits[:, 0], splits[:, 1:]
        else:
            withheld, rates = np.zeros(len(splits)), splits
        totals = _virtual_total(scenario, theta, withheld, rates)
        best = splits[int(np.argmin(totals))]
        half = (hi_box - lo_box) / points
        lo_box = np.maximum(best[:free] - 2.0 * half, 0.0)
        hi_box = np.minimum(best[:free] + 2.0 * half, r_s)

    tol = 1e-9 * max(1.0, float(totals.min()))
    ties = np.nonzero(totals <= totals.min() + tol)[0]
    ties = ties[np.argsort(totals[ties])]
    out = []
    for idx in ties:
        row = splits[idx]
        scale = r_s / row.sum() if row.sum() > 0 else 1.0
        row = row * scale
        if scenario.source.elastic:
            out.append(Allocation(float(row[0]), tuple(row[1:])))
        else:
            out.append(Allocation(0.0, tuple(row)))
    return out


def virtual_kkt_residual(scenario: Scenario, theta, allocation: Allocation) -> float:
    """Equal-marginal residual in virtual-cost units (zero at the optimum)."""
    theta = scenario.check_theta(np.asarray(theta, dtype=float))
    allocation.validate(scenario)
    eps = 1e-11 * max(1.0, scenario.max_rate)
    views = [VirtualCostView(r.cost, r.dist) for r in scenario.relays]

    active, inactive = [], []
    for k, view in enumerate(views):
        rate = allocation.rates[k]
        if rate > eps:
            active.append(float(view.rate_marginal(theta[k], rate)))
        else:
            inactive.append(float(view.rate_marginal(theta[k], 0.0)))
    if scenario.source.elastic:
        if allocation.withheld > eps:
            active.append(float(scenario.source.overflow_marginal(allocation.withheld)))
        else:
            inactive.append(float(scenario.source.overflow_marginal(0.0)))
    if not active:
        return 0.0
    med = float(np.median(active))
    spread = max(abs(c - med) for c in active)
    shortfall = max((max(0.0, med - c0) for c0 in inactive), default=0.0)
    return spread + shortfall


# ---------------------------------------------------------------------------
# Interim transfers and the truth-telling audit.
# ---------------------------------------------------------------------------


def _sample_rivals(scenario: Scenario, relay: int, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u = rng.random((count, scenario.n))
    cols = []
    for k, r in enumerate(scenario.relays):
        if k == relay:
            continue
        cols.append(r.dist.ppf(u[:, k]))
    return np.column_stack(cols) if cols else np.empty((count, 0))


def _profiles_with_own(relay: int, own: np.ndarray, rivals: np.ndarray) -> np.ndarray:
    out = np.empty((rivals.shape[0], rivals.shape[1] + 1))
    out[:, :relay] = rivals[:, :relay]
    out[:, relay] = own
    out[:, relay + 1 :] = rivals[:, relay:]
    return out


def _default_rule(scenario: Scenario) -> Callable[[np.ndarray], np.ndarray]:
    def rule(theta_mat: np.ndarray) -> np.ndarray:
        _, rates, _ = solve_virtual_allocation_batch(scenario, theta_mat)
        return rates

    return rule


def interim_transfer(
    scenario: Scenario,
    relay: int,
    theta_i: float,
    allocation_rule: Callable[[np.ndarray], np.ndarray] | None = None,
    mc_samples: int = 2000,
    seed: int = 0,
    quad_points: int = 33,
) -> float:
    """Expected payment to one relay reporting theta_i under the mechanism.

    E[t] = E[C(theta_i, r_i(theta))] + V(theta_i), with the information rent
    V(theta_i) = -integral over x in [lo, theta_i] of
    E[dC/dtheta(x, r_i(x, theta_others))] dx.  The expectation over rival
    types uses common random numbers across quadrature nodes; the integral
    is composite Simpson on quad_points nodes.  V(lo) = 0: the bottom type
    earns zero rent.
    """
    if mc_samples < 100:
        raise ConfigError(f"mc_samples must be at least 100, got {mc_samples}")
    if not 0 <= relay < scenario.n:
        raise DomainError(f"relay index {relay} out of range")
    lo, hi = scenario.relays[relay].dist.support
    if not lo <= theta_i <= hi:
        raise DomainError(f"theta_i={theta_i!r} outside support [{lo}, {hi}]")
    if quad_points < 3 or quad_points % 2 == 0:
        raise ConfigError("quad_points must be an odd number >= 3")

    rule = allocation_rule or _default_rule(scenario)
    rivals = _sample_rivals(scenario, relay, mc_samples, seed)
    cost = scenario.relays[relay].cost
    inset = lo + _EDGE_INSET * (hi - lo)  # cost evals stay off the support edge

    own = np.full(mc_samples, float(theta_i))
    rates_at_report = rule(_profiles_with_own(relay, own, rivals))[:, relay]
    expected_cost = float(np.mean(cost.evaluate(max(float(theta_i), inset), rates_at_report)))

    if theta_i <= lo:
        return expected_cost

    xs = np.linspace(lo, float(theta_i), quad_points)
    node_means = np.empty(quad_points)
    for k, x in enumerate(xs):
        rates = rule(_profiles_with_own(relay, np.full(mc_samples, x), rivals))[:, relay]
        node_means[k] = float(np.mean(cost.theta_derivative(max(x, inset), rates)))
    h = xs[1] - xs[0]
    weights = np.ones(quad_points)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    rent = -h / 3.0 * float(weights @ node_means)
    return expected_cost + rent


@dataclass(frozen=True)
class TruthTellingReport:
    """Worst interim misreport gain found by the Monte Carlo audit."""

    max_gain: float
    std_error: float
    relay: int
    true_type: float
    misreport: float
    samples: int

    @property
    def within_noise(self) -> bool:
        return self.max_gain <= 3.0 * self.std_error


def truth_telling_audit(
    scenario: Scenario,
    type_grid: int = 20,
    misreport_grid: int = 20,
    mc_samples: int = 10_000,
    seed: int = 0,
    relays: Sequence[int] | None = None,
    master_grid: int = 161,
) -> TruthTellingReport:
    """Search for a profitable interim misreport under the mechanism.

    For every true type on a grid and every misreport on a grid, estimates
    E[t(report)] - E[C(true, r(report))] relative to truthful reporting,
    sharing one set of rival-type draws (and one master type grid, which the
    requested grids are snapped onto) so the information rents difference
    out node by node.  A correct mechanism keeps every gain within
    statistical noise of zero.
    """
    if mc_samples < 100:
        raise ConfigError(f"mc_samples must be at least 100, got {mc_samples}")
    if type_grid < 1 or misreport_grid < 2:
        raise ConfigError("audit grids need at least 1 true type and 2 misreports")
    rule = _default_rule(scenario)
    audited = list(relays) if relays is not None else list(range(scenario.n))

    worst = None
    for relay in audited:
        cost = scenario.relays[relay].cost
        lo, hi = scenario.relays[relay].dist.support
        xs = np.linspace(lo, hi, master_grid)
        true_idx = np.unique(np.round(np.linspace(0, master_grid - 1, type_grid)).astype(int))
        mis_idx = np.unique(
            np.round(np.linspace(0, master_grid - 1, misreport_grid)).astype(int)
        )
        rivals = _sample_rivals(scenario, relay, mc_samples, seed)

        # One mega-batch: every master node against every rival draw.
        own = np.repeat(xs, mc_samples)
        tiled = np.tile(rivals, (master_grid, 1))
        rates = rule(_profiles_with_own(relay, own, tiled))[:, relay]
        rates = rates.reshape(master_grid, mc_samples)

        integrand = np.asarray(
            cost.theta_derivative(xs[:, None], rates), dtype=float
        )
        steps = 0.5 * np.diff(xs)[:, None] * (integrand[1:] + integrand[:-1])
        rent = np.vstack([np.zeros((1, mc_samples)), -np.cumsum(steps, axis=0)])
        transfer = np.asarray(cost.evaluate(xs[:, None], rates)) + rent

        for a in true_idx:
            own_cost = np.asarray(cost.evaluate(xs[a], rates[mis_idx]))
            utility = transfer[mis_idx] - own_cost
            truthful = transfer[a] - np.asarray(cost.evaluate(xs[a], rates[a]))
            diffs = utility - truthful[None, :]
            gains = diffs.mean(axis=1)
            ses = diffs.std(axis=1, ddof=1) / math.sqrt(mc_samples)
            b = int(np.argmax(gains))
            entry = (
                float(gains[b]),
                float(ses[b]),
                relay,
                float(xs[a]),
                float(xs[mis_idx[b]]),
            )
            if worst is None or entry[0] > worst[0]:
                worst = entry

    gain, se, relay, true_type, misreport = worst
    return TruthTellingReport(gain, se, relay, true_type, misreport, mc_samples)
