"""Domain types for relay-network pricing games.

Cost families, relay type distributions, source models, scenarios, and the
traffic/transfer/strategy containers shared by every solver in the package.
Everything is immutable after construction and all evaluations are pure, so
instances can be shared freely across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError

LN2 = math.log(2.0)

COST_FAMILIES = (
    "power_exp",
    "exp_over_theta",
    "quadratic_over_theta",
    "mm1_delay",
)

DIST_FAMILIES = ("uniform", "power_cdf")


@dataclass(frozen=True)
class CostModel:
    """Forwarding cost C(theta, r) of one relay path.

    Families (theta is the path quality; for mm1_delay it is the capacity):

    ======================  =============================
    power_exp               (2**r - 1) / theta
    exp_over_theta          (exp(r) - 1) / theta
    quadratic_over_theta    r**2 / (2 * theta)
    mm1_delay               r / (theta - r),  r < theta
    ======================  =============================

    All families satisfy C(theta, 0) = 0, are strictly increasing and
    strictly convex in r, strictly decreasing in theta, and have a
    nonpositive theta/rate cross derivative.  The solvers rely on exactly
    these sign facts and nothing else.
    """

    family: str

    def __post_init__(self):
        if self.family not in COST_FAMILIES:
            raise DomainError(
                f"unknown cost family {self.family!r}; expected one of {COST_FAMILIES}"
            )

    # The evaluation methods accept scalars or numpy arrays and perform no
    # domain checking; the scalar wrappers cost_eval/marginal_eval do.

    def evaluate(self, theta, rate):
        theta = np.asarray(theta, dtype=float)
        rate = np.asarray(rate, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.family == "power_exp":
                out = np.expm1(rate * LN2) / theta
            elif self.family == "exp_over_theta":
                out = np.expm1(rate) / theta
            elif self.family == "quadratic_over_theta":
                out = rate * rate / (2.0 * theta)
            else:
                out = rate / (theta - rate)
        return _zero_at_zero_rate(out, rate)

    def marginal(self, theta, rate):
        """dC/dr, strictly increasing in rate."""
        theta = np.asarray(theta, dtype=float)
        rate = np.asarray(rate, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.family == "power_exp":
                return LN2 * np.exp2(rate) / theta
            if self.family == "exp_over_theta":
                return np.exp(rate) / theta
            if self.family == "quadratic_over_theta":
                return rate / theta
            return theta / (theta - rate) ** 2

    def theta_derivative(self, theta, rate):
        """dC/dtheta; identically zero at rate == 0 since C(theta, 0) == 0."""
        theta = np.asarray(theta, dtype=float)
        rate = np.asarray(rate, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.family == "power_exp":
                out = -np.expm1(rate * LN2) / theta**2
            elif self.family == "exp_over_theta":
                out = -np.expm1(rate) / theta**2
            elif self.family == "quadratic_over_theta":
                out = -rate * rate / (2.0 * theta**2)
            else:
                out = -rate / (theta - rate) ** 2
        return _zero_at_zero_rate(out, rate)

    def cross_derivative(self, theta, rate):
        """d2C/(dtheta dr), nonpositive on the domain."""
        theta = np.asarray(theta, dtype=float)
        rate = np.asarray(rate, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.family == "power_exp":
                return -LN2 * np.exp2(rate) / theta**2
            if self.family == "exp_over_theta":
                return -np.exp(rate) / theta**2
            if self.family == "quadratic_over_theta":
                return -rate / theta**2
            return -(theta + rate) / (theta - rate) ** 3

    def rate_curvature(self, theta, rate):
        """d2C/dr2, strictly positive on the domain."""
        theta = np.asarray(theta, dtype=float)
        rate = np.asarray(rate, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.family == "power_exp":
                return LN2 * LN2 * np.exp2(rate) / theta
            if self.family == "exp_over_theta":
                return np.exp(rate) / theta
            if self.family == "quadratic_over_theta":
                return np.ones_like(rate) / theta
            return 2.0 * theta / (theta - rate) ** 3

    def rate_cap(self, theta):
        """Largest admissible rate for the given theta (inf if unbounded)."""
        if self.family == "mm1_delay":
            return np.asarray(theta, dtype=float)
        return np.full_like(np.asarray(theta, dtype=float), np.inf)

    # Separable structure of the marginal, marginal = rate_part(r) *
    # theta_part(theta), used for fast analytic inversion where it exists.
    # mm1_delay is not separable and reports accordingly.

    @property
    def marginal_separable(self) -> bool:
        return self.family != "mm1_delay"

    def marginal_rate_part(self, rate):
        rate = np.asarray(rate, dtype=float)
        if self.family == "power_exp":
            return LN2 * np.exp2(rate)
        if self.family == "exp_over_theta":
            return np.exp(rate)
        if self.family == "quadratic_over_theta":
            return rate
        raise DomainError("mm1_delay marginal is not separable")

    def marginal_rate_part_inverse(self, value):
        value = np.asarray(value, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.family == "power_exp":
                return np.log2(value / LN2)
            if self.family == "exp_over_theta":
                return np.log(value)
            if self.family == "quadratic_over_theta":
                return value
        raise DomainError("mm1_delay marginal is not separable")

    def marginal_theta_part(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.family == "mm1_delay":
            raise DomainError("mm1_delay marginal is not separable")
        return 1.0 / theta

    def marginal_theta_part_derivative(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.family == "mm1_delay":
            raise DomainError("mm1_delay marginal is not separable")
        return -1.0 / theta**2


def _zero_at_zero_rate(values, rate):
    # C(theta, 0) = 0 identically, so kill the 0/0 artifacts that appear at
    # (theta -> 0, rate == 0) instead of propagating NaN.
    return np.where(rate == 0.0, 0.0, values)


def _check_theta(model: CostModel, theta: float) -> None:
    if not np.isfinite(theta) or theta <= 0.0:
        raise DomainError(
            f"theta out of domain for {model.family}: theta={theta!r} (must be positive)"
        )


def _check_rate(model: CostModel, theta: float, rate: float) -> None:
    if not np.isfinite(rate) or rate < 0.0:
        raise DomainError(f"rate out of domain: rate={rate!r} (must be >= 0)")
    if model.family == "mm1_delay" and rate >= theta:
        raise DomainError(
            f"rate out of domain for mm1_delay: rate={rate!r} must stay below capacity theta={theta!r}"
        )


def cost_eval(model: CostModel, theta: float, rate: float) -> float:
    """C(theta, rate) with domain validation; exact for the closed forms."""
    _check_theta(model, theta)
    _check_rate(model, theta, rate)
    return float(model.evaluate(theta, rate))


def marginal_eval(model: CostModel, theta: float, rate: float) -> float:
    """dC/dr at (theta, rate) with domain validation."""
    _check_theta(model, theta)
    _check_rate(model, theta, rate)
    return float(model.marginal(theta, rate))


@dataclass(frozen=True)
class TypeDistribution:
    """Law of a relay's privately observed type on a compact support.

    uniform:    F(t) = (t - lo) / (hi - lo)
    power_cdf:  F(t) = ((t - lo) / (hi - lo)) ** gamma,  gamma > 0
    """

    family: str
    lo: float
    hi: float
    gamma: float | None = None

    def __post_init__(self):
        if self.family not in DIST_FAMILIES:
            raise DomainError(
                f"unknown distribution family {self.family!r}; expected one of {DIST_FAMILIES}"
            )
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.lo < self.hi):
            raise DomainError(
                f"degenerate support [{self.lo!r}, {self.hi!r}]: need lo < hi"
            )
        if self.family == "power_cdf":
            if self.gamma is None or not np.isfinite(self.gamma) or self.gamma <= 0:
                raise DomainError(f"power_cdf needs gamma > 0, got {self.gamma!r}")
        elif self.gamma is not None:
            raise DomainError("uniform distribution takes no gamma parameter")

    @property
    def support(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def cdf(self, theta):
        t = (np.asarray(theta, dtype=float) - self.lo) / self.width
        t = np.clip(t, 0.0, 1.0)
        if self.family == "power_cdf":
            return t**self.gamma
        return t

    def pdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        inside = (theta >= self.lo) & (theta <= self.hi)
        t = np.clip((theta - self.lo) / self.width, 0.0, 1.0)
        if self.family == "power_cdf":
            with np.errstate(divide="ignore", invalid="ignore"):
                dens = self.gamma * t ** (self.gamma - 1.0) / self.width
        else:
            dens = np.full_like(t, 1.0 / self.width)
        return np.where(inside, dens, 0.0)

    def ppf(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        if self.family == "power_cdf":
            u = u ** (1.0 / self.gamma)
        return self.lo + self.width * u


@dataclass(frozen=True)
class SourceModel:
    """Traffic source: fixed-rate, or able to withhold rate at a utility loss.

    Elastic sources carry a utility parameter theta_s and the logarithmic
    utility theta_s * log(1 + r); the loss from withholding rate r0 is the
    cost of routing r0 on a virtual overflow link,
    overflow_cost(r0) = theta_s * (log(1 + max_rate) - log(1 + max_rate - r0)).
    """

    mode: str
    max_rate: float
    theta: float | None = None

    def __post_init__(self):
        if self.mode not in ("inelastic", "elastic"):
            raise DomainError(f"source mode must be inelastic or elastic, got {self.mode!r}")
        if not np.isfinite(self.max_rate) or self.max_rate < 0.0:
            raise DomainError(f"max_rate must be >= 0, got {self.max_rate!r}")
        if self.mode == "elastic":
            if self.theta is None or not np.isfinite(self.theta) or self.theta <= 0:
                raise DomainError(f"elastic source needs theta > 0, got {self.theta!r}")
        elif self.theta is not None:
            raise DomainError("inelastic source takes no theta parameter")

    @property
    def elastic(self) -> bool:
        return self.mode == "elastic"

    def _require_elastic(self):
        if not self.elastic:
            raise DomainError("overflow quantities are defined for elastic sources only")

    def utility(self, rate):
        self._require_elastic()
        return self.theta * np.log1p(np.minimum(np.asarray(rate, dtype=float), self.max_rate))

    def overflow_cost(self, withheld):
        self._require_elastic()
        w = np.asarray(withheld, dtype=float)
        return self.theta * (np.log1p(self.max_rate) - np.log1p(self.max_rate - w))

    def overflow_marginal(self, withheld):
        self._require_elastic()
        w = np.asarray(withheld, dtype=float)
        return self.theta / (1.0 + self.max_rate - w)

    def overflow_curvature(self, withheld):
        self._require_elastic()
        w = np.asarray(withheld, dtype=float)
        return self.theta / (1.0 + self.max_rate - w) ** 2

    def overflow_marginal_inverse(self, price):
        """Withheld rate whose overflow marginal equals price, clamped to [0, max_rate]."""
        self._require_elastic()
        p = np.asarray(price, dtype=float)
        with np.errstate(divide="ignore"):
            r0 = 1.0 + self.max_rate - self.theta / p
        return np.clip(r0, 0.0, self.max_rate)


@dataclass(frozen=True)
class Relay:
    """One relay path: its cost model and the prior law of its type."""

    cost: CostModel
    dist: TypeDistribution


@dataclass(frozen=True)
class Scenario:
    """A source plus an ordered list of relays.

    Construction validates that each relay's support is admissible for its
    cost family: the 1/theta families need lo >= 0, and mm1_delay needs the
    source rate to stay strictly below the smallest capacity in the support.
    A zero max_rate is admitted as a degenerate edge case; the equilibrium
    solvers require a strictly positive rate and say so.
    """

    source: SourceModel
    relays: tuple[Relay, ...]

    def __post_init__(self):
        object.__setattr__(self, "relays", tuple(self.relays))
        if len(self.relays) < 1:
            raise DomainError("a scenario needs at least one relay")
        for k, relay in enumerate(self.relays):
            if not isinstance(relay, Relay):
                raise DomainError(f"relays[{k}] must be a Relay")
            lo = relay.dist.lo
            if relay.cost.family == "mm1_delay":
                if self.source.max_rate >= lo:
                    raise DomainError(
                        f"relays[{k}]: mm1_delay needs max_rate < min capacity "
                        f"({self.source.max_rate!r} >= {lo!r})"
                    )
            elif lo < 0.0:
                raise DomainError(
                    f"relays[{k}]: support must be nonnegative for {relay.cost.family}"
                )

    @property
    def n(self) -> int:
        return len(self.relays)

    @property
    def max_rate(self) -> float:
        return self.source.max_rate

    def with_max_rate(self, max_rate: float) -> "Scenario":
        return Scenario(replace(self.source, max_rate=max_rate), self.relays)

    def is_symmetric(self) -> bool:
        first = self.relays[0]
        return all(r == first for r in self.relays[1:])

    def common_support(self) -> tuple[float, float] | None:
        supports = {r.dist.support for r in self.relays}
        return supports.pop() if len(supports) == 1 else None

    def check_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape[-1] != self.n:
            raise DomainError(f"expected {self.n} type values, got {theta.shape[-1]}")
        for k, relay in enumerate(self.relays):
            lo, hi = relay.dist.support
            col = theta[..., k]
            if np.any(col < lo) or np.any(col > hi):
                raise DomainError(
                    f"theta[{k}] outside support [{lo:g}, {hi:g}]"
                )
        return theta


def sample_types(scenario: Scenario, count: int, seed: int) -> np.ndarray:
    """Draw count i.i.d. type vectors, one column per relay, via inverse cdf.

    Deterministic for a fixed seed; shape (count, n).
    """
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count!r}")
    rng = np.random.default_rng(seed)
    u = rng.random((count, scenario.n))
    cols = [relay.dist.ppf(u[:, k]) for k, relay in enumerate(scenario.relays)]
    return np.column_stack(cols)


@dataclass(frozen=True)
class Allocation:
    """Feasible traffic split: withheld rate plus one rate per relay."""

    withheld: float
    rates: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        object.__setattr__(self, "withheld", float(self.withheld))
        if self.withheld < 0.0 or any(r < 0.0 for r in self.rates):
            raise DomainError("allocation rates must be nonnegative")

    @property
    def total(self) -> float:
        return self.withheld + sum(self.rates)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.rates, dtype=float)

    def validate(self, scenario: Scenario, tol: float = 1e-12) -> None:
        if len(self.rates) != scenario.n:
            raise DomainError(
                f"allocation has {len(self.rates)} rates for {scenario.n} relays"
            )
        if not scenario.source.elastic and self.withheld != 0.0:
            raise DomainError("inelastic sources cannot withhold traffic")
        r_s = scenario.max_rate
        if abs(self.total - r_s) > tol * max(1.0, r_s):
            raise DomainError(
                f"allocation sums to {self.total!r}, expected {r_s!r}"
            )


@dataclass(frozen=True)
class Outcome:
    """A contract realization: traffic allocation plus transfer payments."""

    allocation: Allocation
    transfers: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "transfers", tuple(float(t) for t in self.transfers))
        if any(t < 0.0 for t in self.transfers):
            raise DomainError("transfer payments must be nonnegative")
        if len(self.transfers) != len(self.allocation.rates):
            raise DomainError("one transfer per relay required")


class PricingStrategy:
    """Monotone decreasing map from type to unit price, with inverse lookup.

    Three representations:
      * closed-form-symmetric: a callable price(theta) on the support,
        inverted by bisection;
      * tabulated-grid: sorted (theta, price) pairs with monotone
        piecewise-linear interpolation (this is what the ODE solver emits);
      * constant: the monopoly edge case, where the price does not depend
        on the type and the inverse degenerates to the support edges.
    """

    __slots__ = ("kind", "support", "_thetas", "_prices", "_fn", "_level")

    def __init__(self, kind, support, thetas=None, prices=None, fn=None, level=None):
        self.kind = kind
        self.support = (float(support[0]), float(support[1]))
        self._thetas = thetas
        self._prices = prices
        self._fn = fn
        self._level = level

    @classmethod
    def from_table(cls, thetas, prices) -> "PricingStrategy":
        thetas = np.asarray(thetas, dtype=float)
        prices = np.asarray(prices, dtype=float)
        if thetas.ndim != 1 or thetas.shape != prices.shape or thetas.size < 2:
            raise DomainError("tabulated strategy needs matching 1-d grids of size >= 2")
        if np.any(np.diff(thetas) <= 0.0):
            raise DomainError("tabulated strategy grid must be strictly increasing in theta")
        if np.any(np.diff(prices) >= 0.0):
            raise DomainError("tabulated strategy must be strictly decreasing in price")
        return cls(
            "tabulated-grid",
            (thetas[0], thetas[-1]),
            thetas=thetas,
            prices=prices,
        )

    @classmethod
    def from_callable(cls, fn: Callable, support) -> "PricingStrategy":
        lo, hi = float(support[0]), float(support[1])
        if not lo < hi:
            raise DomainError("strategy support must be nondegenerate")
        if not float(fn(lo)) > float(fn(hi)):
            raise DomainError("strategy callable must be decreasing on its support")
        return cls("closed-form-symmetric", (lo, hi), fn=fn)

    @classmethod
    def constant(cls, price: float, support) -> "PricingStrategy":
        return cls("constant", support, level=float(price))

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    @property
    def price_at_low_type(self) -> float:
        """Highest price on the strategy (charged by the worst type)."""
        return float(self.price(self.support[0]))

    @property
    def price_at_high_type(self) -> float:
        """Lowest price on the strategy (charged by the best type)."""
        return float(self.price(self.support[1]))

    def price(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.kind == "tabulated-grid":
            return np.interp(theta, self._thetas, self._prices)
        if self.kind == "constant":
            return np.full_like(theta, self._level)
        return np.asarray(self._fn(theta), dtype=float)

    def inverse(self, price):
        """Type w(price) proposing the given price, clamped to the support."""
        price = np.asarray(price, dtype=float)
        lo, hi = self.support
        if self.kind == "constant":
            # Rivals beat a constant price iff they price strictly below it.
            return np.where(price < self._level, hi, lo)
        if self.kind == "tabulated-grid":
            return np.interp(price, self._prices[::-1], self._thetas[::-1])
        p_lo, p_hi = float(self._fn(lo)), float(self._fn(hi))
        t_lo = np.full_like(price, lo)
        t_hi = np.full_like(price, hi)
        for _ in range(80):
            mid = 0.5 * (t_lo + t_hi)
            higher = np.asarray(self._fn(mid), dtype=float) > price
            t_lo = np.where(higher, mid, t_lo)
            t_hi = np.where(higher, t_hi, mid)
        out = 0.5 * (t_lo + t_hi)
        out = np.where(price >= p_lo, lo, out)
        return np.where(price <= p_hi, hi, out)

    def table(self, grid_size: int = 201) -> tuple[np.ndarray, np.ndarray]:
        """Uniform-type tabulation (theta ascending, price decreasing)."""
        lo, hi = self.support
        thetas = np.linspace(lo, hi, grid_size)
        return thetas, np.asarray(self.price(thetas), dtype=float)
