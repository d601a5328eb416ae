"""Stochastic control of a grid-connected producer with battery storage."""
from .model_core import (BatteryPath, ControlPath, MarketPath, ModelParams, RegimeCriterion,
                         TimeGrid, clipped_step, cma, payoff, regime_penalty, validate_control)
from .market_sim import DiffusionSpec, PathEnsemble, simulate, to_market
from .smoothing import SmoothedModel, f_tilde_eps, h_tilde_eps, mollify

__version__ = "0.1.0"
