"""Stochastic multi-state SIRD model with interstate mobility: EKF estimation
from death counts and counterfactual policy calendars."""

__version__ = "0.1.0"

from .core import (ALL_POLICIES, ConfigError, Country, LatentState, ModelParams, NumericalError,
                   PolicyCalendar, PolicyInterval, PolicyKind, PolicyMultipliers, multipliers_at,
                   validate)
from .mobility import EffectiveMobility, MobilitySpec

__all__ = [
    "ALL_POLICIES", "ConfigError", "Country", "EffectiveMobility", "LatentState", "MobilitySpec",
    "ModelParams", "NumericalError", "PolicyCalendar", "PolicyInterval", "PolicyKind",
    "PolicyMultipliers", "multipliers_at", "validate",
]
