"""Differentiable quasi-static rope simulation and shape-matching identification."""
from .rope import RopeState, anchored
from .solvers import SolverParams, StepReport, simulate_quasi_static, value_and_grad
from .losses import Objective, ObservationFrame, evaluate_objective
from .data import RawFrame, generate_synthetic_frames, preprocess_frame
from .optimize import (
    OptimizationProblem,
    OptimizationResult,
    RopeSetup,
    estimate_control_point,
    grid_search,
    identify_parameters,
    shape_control,
)

__all__ = [
    "RopeState",
    "anchored",
    "SolverParams",
    "StepReport",
    "simulate_quasi_static",
    "value_and_grad",
    "Objective",
    "ObservationFrame",
    "evaluate_objective",
    "RawFrame",
    "generate_synthetic_frames",
    "preprocess_frame",
    "OptimizationProblem",
    "OptimizationResult",
    "RopeSetup",
    "estimate_control_point",
    "grid_search",
    "identify_parameters",
    "shape_control",
]
