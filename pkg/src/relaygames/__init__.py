"""Equilibria, contracts, and efficiency analysis for parallel relay networks."""

from .errors import (
    ConfigError,
    ConvergenceError,
    DomainError,
    ScenarioFormatError,
    SingularityError,
)
from .model import (
    Allocation,
    CostModel,
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

__version__ = "0.1.0"
