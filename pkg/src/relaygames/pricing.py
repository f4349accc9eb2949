"""Equilibria of the relay pricing game.

With complete information every Nash equilibrium is efficient and is
supported by linear unit prices equal to the optimal marginal cost.  With
private types and linear price bids the game becomes a procurement contest:
the lowest bidder carries all admitted traffic, and the equilibrium price
maps solve a coupled system of ODEs in the inverse maps w_i(p).

Sign convention.  The first-order condition of the expected-profit
maximization gives, for the inverse maps,

    dw_i/dp = F_i(w_i) / ((n-1) f_i(w_i)) *
              [ (n-1) r_s / D_i - sum_j r_s / D_j ],   D_j = p r_s - C_j(w_j, r_s),

which is strictly negative wherever margins are positive, as it must be for
strictly decreasing strategies; for n = 2 it reduces to
dw_1/dp = -F_1 r_s / (f_1 D_2).  This is the form implemented here (and the
symmetric closed form satisfies it, which the verify module checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import quadrature
from .errors import ConfigError, ConvergenceError, DomainError, SingularityError
from .model import Allocation, CostModel, PricingStrategy, Scenario, TypeDistribution
from .social import solve_social_optimum


def complete_info_pricing_equilibrium(
    scenario: Scenario, theta
) -> tuple[tuple[float, ...], Allocation]:
    """Efficient linear-price equilibrium when all types are public.

    Every relay quotes the optimal marginal cost c_star per unit; the
    source's passive cost-minimizing reaction then reproduces the socially
    optimal allocation.
    """
    allocation, cert = solve_social_optimum(scenario, theta)
    prices = (cert.c_star,) * scenario.n
    return prices, allocation


def _check_symmetric_args(cost: CostModel, dist: TypeDistribution, n: int, r_s: float, theta=None):
    if n < 1:
        raise DomainError(f"need n >= 1 relays, got {n}")
    if r_s <= 0.0:
        raise DomainError("pricing equilibria need a strictly positive source rate")
    if theta is not None and not (dist.lo <= theta <= dist.hi):
        raise DomainError(f"theta={theta!r} outside support [{dist.lo}, {dist.hi}]")


def symmetric_bne_price(
    cost: CostModel,
    dist: TypeDistribution,
    n: int,
    r_s: float,
    theta: float,
    tol: float = quadrature.DEFAULT_TOL,
) -> float:
    """Equilibrium unit price of a type-theta relay among n symmetric rivals.

    p(theta) = (1/r_s) * [ C(theta, r_s)
               - int_lo^theta F(x)**(n-1) dC/dtheta(x, r_s) dx / F(theta)**(n-1) ].

    The 0/0 ratio at the bottom of the support is resolved by continuity:
    the worst type earns zero profit, so p(lo) = C(lo, r_s) / r_s.  With a
    single relay the integral telescopes and the price is constant at that
    same zero-profit level.
    """
    _check_symmetric_args(cost, dist, n, r_s, theta)
    theta = float(theta)
    lo = dist.lo
    if theta <= lo:
        return float(cost.evaluate(lo, r_s)) / r_s
    f_pow = float(dist.cdf(theta)) ** (n - 1)
    if f_pow == 0.0:
        return float(cost.evaluate(lo, r_s)) / r_s
    integral = quadrature.adaptive_simpson(
        lambda x: float(dist.cdf(x)) ** (n - 1) * float(cost.theta_derivative(x, r_s)),
        lo,
        theta,
        tol,
    )
    return (float(cost.evaluate(theta, r_s)) - integral / f_pow) / r_s


def symmetric_value_function(
    cost: CostModel,
    dist: TypeDistribution,
    n: int,
    r_s: float,
    theta: float,
    tol: float = quadrature.DEFAULT_TOL,
) -> float:
    """Expected equilibrium profit of a type-theta relay (zero at the bottom)."""
    _check_symmetric_args(cost, dist, n, r_s, theta)
    if theta <= dist.lo:
        return 0.0
    return -quadrature.adaptive_simpson(
        lambda x: float(dist.cdf(x)) ** (n - 1) * float(cost.theta_derivative(x, r_s)),
        dist.lo,
        float(theta),
        tol,
    )


def symmetric_bne_strategy(
    cost: CostModel,
    dist: TypeDistribution,
    n: int,
    r_s: float,
    grid_size: int = 801,
    tol: float = quadrature.DEFAULT_TOL,
) -> PricingStrategy:
    """Tabulate the symmetric equilibrium on a uniform type grid.

    The running integral is accumulated cell by cell so the whole table
    costs one adaptive sweep of the support.
    """
    _check_symmetric_args(cost, dist, n, r_s)
    lo, hi = dist.support
    thetas = np.linspace(lo, hi, grid_size)
    base = float(cost.evaluate(lo, r_s)) / r_s
    if n == 1:
        return PricingStrategy.constant(base, (lo, hi))
    partials = quadrature.cumulative_simpson(
        lambda x: float(dist.cdf(x)) ** (n - 1) * float(cost.theta_derivative(x, r_s)),
        thetas,
        tol,
    )
    f_pow = np.asarray(dist.cdf(thetas)) ** (n - 1)
    prices = np.empty(grid_size)
    prices[0] = base
    with np.errstate(divide="ignore", invalid="ignore"):
        prices[1:] = (
            np.asarray(cost.evaluate(thetas[1:], r_s)) - np.asarray(partials[1:]) / f_pow[1:]
        ) / r_s
    thetas, prices = _strictly_decreasing(thetas, prices)
    return PricingStrategy.from_table(thetas, prices)


def _strictly_decreasing(thetas, prices):
    """Drop rows that violate strict price decrease (floating-point ties)."""
    keep = [0]
    for k in range(1, len(thetas)):
        if prices[k] < prices[keep[-1]] and thetas[k] > thetas[keep[-1]]:
            keep.append(k)
    idx = np.asarray(keep)
    return thetas[idx], prices[idx]


# ---------------------------------------------------------------------------
# Equilibrium ODE right-hand sides.
# ---------------------------------------------------------------------------


def _hazard_ratio(dist: TypeDistribution, w: float) -> float:
    """F/f, with the removable 0/0 at the bottom of the support set to 0."""
    f = float(dist.pdf(w))
    big_f = float(dist.cdf(w))
    if f <= 0.0:
        return 0.0
    return big_f / f


def _margins(scenario: Scenario, p: float, w: np.ndarray, rate: float) -> np.ndarray:
    costs = np.array(
        [float(relay.cost.evaluate(w[j], rate)) for j, relay in enumerate(scenario.relays)]
    )
    margins = p * scenario.max_rate - costs
    bad = np.nonzero(margins <= 0.0)[0]
    if bad.size:
        raise SingularityError(
            f"zero profit margin for relay {int(bad[0])} at p={p:.6g}"
        )
    return margins


def asymmetric_ode_rhs(p: float, w, scenario: Scenario) -> np.ndarray:
    """dw/dp for the inelastic linear-price contest at price p, state w.

    Requires positive profit margins p*r_s - C_j(w_j, r_s) for every relay;
    a nonpositive margin raises SingularityError so integrators can stop.
    """
    if scenario.source.elastic:
        raise DomainError("asymmetric_ode_rhs is the inelastic system; see elastic_ode_rhs")
    if scenario.n < 2:
        raise DomainError("the equilibrium ODE needs at least two relays")
    w = np.asarray(w, dtype=float)
    scenario.check_theta(w)
    return _inelastic_rhs_unchecked(p, w, scenario)


def _inelastic_rhs_unchecked(p: float, w: np.ndarray, scenario: Scenario) -> np.ndarray:
    n = scenario.n
    r_s = scenario.max_rate
    lo_hi = [relay.dist.support for relay in scenario.relays]
    w_cl = np.array([min(max(w[j], lo_hi[j][0]), lo_hi[j][1]) for j in range(n)])
    margins = _margins(scenario, p, w_cl, r_s)
    inv = r_s / margins
    total = inv.sum()
    ratio = np.array(
        [_hazard_ratio(relay.dist, w_cl[j]) for j, relay in enumerate(scenario.relays)]
    )
    return ratio / (n - 1) * ((n - 1) * inv - total)


def elastic_ode_rhs(
    p: float, w, scenario: Scenario, withheld_rate_term: bool = False
) -> np.ndarray:
    """dw/dp for the elastic-source contest.

    The source's best response to a winning unit price p is to withhold
    r0(p) = clamp(inverse-overflow-marginal(p), 0, r_s), with
    dr0/dp = 1 / overflow_curvature on the interior and 0 when clamped.
    The published system carries a rate-derivative term written against the
    fixed total rate (identically zero); withheld_rate_term=True reads that
    term as the withheld-rate derivative instead.  When the clamp is
    inactive the expression reduces exactly to the inelastic system.
    """
    if not scenario.source.elastic:
        raise DomainError("elastic_ode_rhs needs an elastic source")
    if scenario.n < 2:
        raise DomainError("the equilibrium ODE needs at least two relays")
    w = np.asarray(w, dtype=float)
    scenario.check_theta(w)

    n = scenario.n
    src = scenario.source
    r_s = scenario.max_rate
    r0 = float(src.overflow_marginal_inverse(p))
    interior = 0.0 < r0 < r_s
    dr0 = 1.0 / float(src.overflow_curvature(r0)) if interior else 0.0
    r_eff = r_s - r0

    costs = np.array(
        [float(relay.cost.evaluate(w[j], r_eff)) for j, relay in enumerate(scenario.relays)]
    )
    margins = p * r_s - costs
    bad = np.nonzero(margins <= 0.0)[0]
    if bad.size:
        raise SingularityError(f"zero profit margin for relay {int(bad[0])} at p={p:.6g}")
    own_marginal = np.array(
        [float(relay.cost.marginal(w[j], r_eff)) for j, relay in enumerate(scenario.relays)]
    )
    inv = 1.0 / margins
    total_inv = inv.sum()
    rate_term = dr0 if withheld_rate_term else 0.0

    own = -(n - 2) * r_eff * inv + dr0 * (p - own_marginal) * inv
    rivals = (r_s + rate_term * (p - own_marginal)) * (total_inv - inv)
    brace = own + rivals
    ratio = np.array(
        [_hazard_ratio(relay.dist, w[j]) for j, relay in enumerate(scenario.relays)]
    )
    # Same decreasing-strategy sign convention as the inelastic system.
    return -ratio / (n - 1) * brace


# ---------------------------------------------------------------------------
# Winner determination and expected profit.
# ---------------------------------------------------------------------------


def winner_allocation(prices, scenario: Scenario) -> Allocation:
    """Source best response to quoted unit prices.

    All admitted traffic goes to the cheapest relay (ties break to the
    lowest index; with continuous types and strictly decreasing strategies
    ties are a probability-zero event).  An elastic source additionally
    withholds the overflow rate matched to the winning price.
    """
    prices = np.asarray(prices, dtype=float)
    if prices.shape != (scenario.n,):
        raise DomainError(f"expected {scenario.n} prices, got shape {prices.shape}")
    if not np.all(np.isfinite(prices)):
        raise DomainError("prices must be finite")
    winner = int(np.argmin(prices))
    rates = [0.0] * scenario.n
    if scenario.source.elastic:
        r0 = float(scenario.source.overflow_marginal_inverse(prices[winner]))
        rates[winner] = scenario.max_rate - r0
        return Allocation(r0, tuple(rates))
    rates[winner] = scenario.max_rate
    return Allocation(0.0, tuple(rates))


def expected_profit(
    scenario: Scenario,
    relay: int,
    theta_i: float,
    price,
    strategies: Sequence[PricingStrategy],
):
    """Expected profit of one relay bidding a unit price against rival maps.

    Pr{win} * (price * r_s - C_i(theta_i, r_s)); the win probability is the
    product of rival cdfs evaluated at their inverse maps, with prices
    outside a rival's range clamped to its support ends.
    """
    if not 0 <= relay < scenario.n:
        raise DomainError(f"relay index {relay} out of range")
    if len(strategies) != scenario.n:
        raise DomainError(f"expected {scenario.n} strategies")
    lo, hi = scenario.relays[relay].dist.support
    if not lo <= theta_i <= hi:
        raise DomainError(f"theta_i={theta_i!r} outside support [{lo}, {hi}]")
    p = np.asarray(price, dtype=float)
    r_s = scenario.max_rate
    win = np.ones_like(p)
    for j, other in enumerate(scenario.relays):
        if j == relay:
            continue
        win = win * np.asarray(other.dist.cdf(strategies[j].inverse(p)))
    margin = p * r_s - float(scenario.relays[relay].cost.evaluate(theta_i, r_s))
    out = win * margin
    return float(out) if np.isscalar(price) or np.ndim(price) == 0 else out


# ---------------------------------------------------------------------------
# Asymmetric equilibrium by shooting on the common lowest price.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShootingConfig:
    """Knobs for the boundary-value shooting solver.

    The integrator steps uniformly in log price, which resolves both the
    fast dynamics near the lowest price and the long tail when the bottom
    type's zero-profit price is large.  tail_cut truncates that tail: the
    integration targets types down to lo + tail_cut * width.  When None it
    is chosen automatically (0 when the bottom type has finite cost, 1e-3
    of the support width otherwise).
    """

    p_min_bracket: tuple[float, float] | None = None
    log_step: float | None = None
    steps: int = 2500
    max_iterations: int = 90
    boundary_tol: float = 1e-6
    type_tol: float = 1e-4
    tail_cut: float | None = None
    margin_floor: float = 1e-6
    min_step_factor: float = 1e-6

    def __post_init__(self):
        if self.steps < 16:
            raise ConfigError("steps must be at least 16")
        if self.boundary_tol <= 0 or self.type_tol <= 0:
            raise ConfigError("boundary_tol and type_tol must be positive")
        if self.log_step is not None and self.log_step <= 0:
            raise ConfigError("log_step must be positive")
        if self.p_min_bracket is not None:
            lo, hi = self.p_min_bracket
            if not (0 < lo < hi):
                raise ConfigError(f"invalid p_min bracket ({lo!r}, {hi!r})")


@dataclass(frozen=True)
class ShootingDiagnostics:
    iterations: int
    bracket: tuple[float, float]
    price_gap: float
    type_gaps: tuple[float, ...]
    converged: bool
    steps_taken: int
    lower_targets: tuple[float, ...]
    target_price: float


@dataclass(frozen=True)
class BneSolution:
    """Solved Bayesian equilibrium: one strategy per relay, common low price."""

    strategies: tuple[PricingStrategy, ...]
    p_min: float
    diagnostics: ShootingDiagnostics


def _fast_rhs_factory(scenario: Scenario):
    """Scalar-math right-hand side for the shooting loop.

    Exploits that the solver requires one shared cost model and a common
    support: the cost reduces to scale/theta (or the mm1 form) and the
    hazard ratio F/f of both distribution families is (theta - lo) / gamma.
    Pinned to asymmetric_ode_rhs by a unit test.
    """
    cost = scenario.relays[0].cost
    r_s = scenario.max_rate
    lo, hi = scenario.common_support()
    if cost.family == "power_exp":
        scale = math.pow(2.0, r_s) - 1.0
        cost_at = lambda t: scale / t
    elif cost.family == "exp_over_theta":
        scale = math.expm1(r_s)
        cost_at = lambda t: scale / t
    elif cost.family == "quadratic_over_theta":
        scale = 0.5 * r_s * r_s
        cost_at = lambda t: scale / t
    else:
        cost_at = lambda t: r_s / (t - r_s)
    gammas = [
        (r.dist.gamma if r.dist.family == "power_cdf" else 1.0) for r in scenario.relays
    ]
    n = scenario.n

    def rhs(p: float, w: list) -> list:
        margins = []
        total = 0.0
        for j in range(n):
            t = w[j]
            t = lo if t < lo else (hi if t > hi else t)
            m = p * r_s - cost_at(t)
            if m <= 0.0:
                raise SingularityError(
                    f"zero profit margin for relay {j} at p={p:.6g}"
                )
            inv = r_s / m
            margins.append(inv)
            total += inv
        out = []
        for j in range(n):
            t = w[j]
            t = lo if t < lo else (hi if t > hi else t)
            ratio = (t - lo) / gammas[j]
            out.append(ratio / (n - 1) * ((n - 1) * margins[j] - total))
        return out

    def min_margin(p: float, w: list) -> float:
        worst = math.inf
        for j in range(n):
            t = w[j]
            t = lo if t < lo else (hi if t > hi else t)
            worst = min(worst, p * r_s - cost_at(t))
        return worst

    return rhs, min_margin


def _validate_shooting_scenario(scenario: Scenario) -> tuple[float, float]:
    if scenario.source.elastic:
        raise DomainError("the shooting solver handles inelastic sources only")
    if scenario.max_rate <= 0:
        raise DomainError("shooting needs a strictly positive source rate")
    if scenario.n < 2:
        raise DomainError("shooting needs at least two relays")
    first_cost = scenario.relays[0].cost
    if any(r.cost != first_cost for r in scenario.relays[1:]):
        raise DomainError(
            "shooting requires identical cost models across relays "
            "(a single unknown lowest price anchors the boundary)"
        )
    support = scenario.common_support()
    if support is None:
        raise DomainError("shooting requires a common type support across relays")
    return support


def solve_asymmetric_bne(
    scenario: Scenario, config: ShootingConfig | None = None
) -> BneSolution:
    """Equilibrium strategies when relays share costs but not type priors.

    Shooting on the unknown common lowest price p_min: start every inverse
    map at the top type, integrate the equilibrium ODE upward in price, and
    bisect p_min on whether the maps reach the bottom of the support before
    or after the bottom type's zero-profit price.
    """
    config = config or ShootingConfig()
    lo, hi = _validate_shooting_scenario(scenario)
    cost = scenario.relays[0].cost
    r_s = scenario.max_rate
    width = hi - lo

    cut = config.tail_cut
    if cut is None:
        cut = 0.0 if np.isfinite(cost.evaluate(lo, r_s)) else 1e-3
    if not 0.0 <= cut < 1.0:
        raise ConfigError(f"tail_cut must lie in [0, 1), got {cut!r}")
    target_lo = lo + cut * width
    p_top = float(cost.evaluate(target_lo, r_s)) / r_s
    if not np.isfinite(p_top):
        raise ConfigError(
            "bottom type has unbounded cost; set a positive tail_cut"
        )
    p_floor = float(cost.evaluate(hi, r_s)) / r_s

    if config.p_min_bracket is not None:
        b_lo, b_hi = config.p_min_bracket
    else:
        b_lo = p_floor * (1.0 + 1e-9) + 1e-300
        b_hi = p_top
    if not b_lo < b_hi:
        raise DomainError(f"empty p_min bracket ({b_lo!r}, {b_hi!r})")

    u_end = math.log(p_top)
    h0 = config.log_step or (u_end - math.log(b_lo)) / config.steps
    h_min = h0 * config.min_step_factor
    floor = config.margin_floor * p_top * r_s
    targets = np.full(scenario.n, target_lo)

    rhs_p, min_margin = _fast_rhs_factory(scenario)
    n = scenario.n
    target = float(target_lo)

    def integrate(p_min: float):
        """Integrate upward from p_min; classify the terminal event."""

        def rhs_u(u, state):
            p = math.exp(u)
            vals = rhs_p(p, state)
            return [p * v for v in vals]

        u = math.log(p_min)
        w = [float(hi)] * n
        ps = [p_min]
        ws = [list(w)]
        h = h0
        hard_cap = config.steps * 64
        while u < u_end - 1e-15 and len(ps) < hard_cap:
            if min_margin(math.exp(u), w) < floor:
                h = max(0.5 * h, h_min)
            h_eff = min(h, u_end - u)
            try:
                k1 = rhs_u(u, w)
                k2 = rhs_u(u + 0.5 * h_eff, [w[j] + 0.5 * h_eff * k1[j] for j in range(n)])
                k3 = rhs_u(u + 0.5 * h_eff, [w[j] + 0.5 * h_eff * k2[j] for j in range(n)])
                k4 = rhs_u(u + h_eff, [w[j] + h_eff * k3[j] for j in range(n)])
                w_new = [
                    w[j] + h_eff / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                    for j in range(n)
                ]
            except SingularityError:
                h *= 0.5
                if h < h_min:
                    return "early", ps, ws, math.exp(u), w
                continue
            if not all(math.isfinite(v) for v in w_new):
                h *= 0.5
                if h < h_min:
                    return "early", ps, ws, math.exp(u), w
                continue
            if any(v <= target for v in w_new):
                alpha = min(
                    (w[j] - target) / (w[j] - w_new[j])
                    for j in range(n)
                    if w_new[j] < w[j] and w_new[j] <= target
                )
                alpha = min(max(alpha, 0.0), 1.0)
                p_cross = math.exp(u + alpha * h_eff)
                w_cross = [w[j] + alpha * (w_new[j] - w[j]) for j in range(n)]
                ps.append(p_cross)
                ws.append(w_cross)
                return "crossed", ps, ws, p_cross, w_cross
            u += h_eff
            w = w_new
            ps.append(math.exp(u))
            ws.append(list(w))
        crossed = all(v <= target + 1e-12 for v in w)
        return ("crossed" if crossed else "late"), ps, ws, math.exp(u), w

    # The corner (bottom type, zero-profit price) is a 0/0 point of the ODE
    # that trajectories approach tangentially, so the lagging components get
    # their own, looser type-space tolerance.
    tol_p = config.boundary_tol * max(1.0, p_top)
    tol_t = config.type_tol * width
    best = None
    trace = []
    lo_p, hi_p = b_lo, b_hi
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        p_try = 0.5 * (lo_p + hi_p)
        status, ps, ws, p_end, w_end = integrate(p_try)
        price_gap = abs(p_top - p_end)
        type_gaps = np.abs(np.asarray(w_end) - targets)
        trace.append((p_try, status, price_gap, float(type_gaps.max())))
        if status == "crossed":
            score = max(price_gap / max(1.0, p_top), float(type_gaps.max()) / width)
            if best is None or score < best[0]:
                best = (score, p_try, ps, ws, price_gap, type_gaps)
        if status == "late":
            hi_p = p_try
        else:
            lo_p = p_try
        if hi_p - lo_p <= max(1e-13 * p_top, 4e-16):
            break

    if best is None:
        raise ConvergenceError(
            "shooting never reached the bottom of the type support; "
            f"bracket ({b_lo:.6g}, {b_hi:.6g}) exhausted",
            trace=trace,
        )

    _, p_min, ps, ws, price_gap, type_gaps = best
    converged = price_gap <= tol_p and float(type_gaps.max()) <= tol_t
    prices = np.asarray(ps)
    states = np.vstack(ws)
    strategies = []
    for i in range(scenario.n):
        thetas, tab = _strictly_decreasing(states[::-1, i], prices[::-1])
        # Anchor the exact boundary value: every inverse map ends at the
        # bottom target type at the zero-profit price.
        if thetas[0] > target_lo and tab[0] < p_top:
            thetas = np.concatenate(([target_lo], thetas))
            tab = np.concatenate(([p_top], tab))
        strategies.append(PricingStrategy.from_table(thetas, tab))
    diag = ShootingDiagnostics(
        iterations=iterations,
        bracket=(lo_p, hi_p),
        price_gap=price_gap,
        type_gaps=tuple(float(g) for g in type_gaps),
        converged=converged,
        steps_taken=len(ps),
        lower_targets=tuple(float(t) for t in targets),
        target_price=p_top,
    )
    return BneSolution(tuple(strategies), float(p_min), diag)
