"""ammlab: liquidity provision and pool design for geometric-mean market makers."""
from ammlab.amm_pricing import CGMMM, CustomPricing, PoolSpec
from ammlab.errors import (AmmLabError, ConfigError, ConvergenceError, DataError, DomainError, InvariantViolation,
                           NumericalError, PricingFunctionError)
from ammlab.market_model import MarketParams
from ammlab.portfolio import ConstraintSet

__version__ = "0.1.0"

__all__ = [
    "AmmLabError",
    "CGMMM",
    "ConfigError",
    "ConstraintSet",
    "ConvergenceError",
    "CustomPricing",
    "DataError",
    "DomainError",
    "InvariantViolation",
    "MarketParams",
    "NumericalError",
    "PoolSpec",
    "PricingFunctionError",
]
