"""Robust policy control barrier functions from sampled rollouts.

The value of a state is the largest future constraint violation of a fixed
rollout policy under sampled bounded disturbances, measured on a cubic
spline through the rollout so that its gradient is accurate. The value and
gradient drive a CBF-QP safety filter with box input constraints.
"""
from .filter import (AlphaFn, FilterDecision, cbf_qp, hocbf_di, solve_box_halfspace_qp,
                     step_filtered)
from .rollout import RolloutError, RolloutResult, rollout, rollout_batch, sample_disturbances
from .spline import SplineMax, naive_max, spline_max
from .systems import (Policy, SystemModel, lqr_gain, make_double_integrator, make_policy,
                      make_segway)
from .value import (ValueConfig, ValueEstimate, evaluate, evaluate_batch, evaluate_pcbf,
                    evaluate_values)

__version__ = "0.1.0"

__all__ = [
    "AlphaFn", "FilterDecision", "Policy", "RolloutError", "RolloutResult", "SplineMax",
    "SystemModel", "ValueConfig", "ValueEstimate", "cbf_qp", "evaluate", "evaluate_batch",
    "evaluate_pcbf", "evaluate_values", "hocbf_di", "lqr_gain", "make_double_integrator",
    "make_policy", "make_segway", "naive_max", "rollout", "rollout_batch",
    "sample_disturbances", "solve_box_halfspace_qp", "spline_max", "step_filtered",
]
