"""Policy gradient for domain-randomized linear-quadratic control."""

from .control_core import (
    ConvergenceError,
    DareSolution,
    InstabilityError,
    SolveReport,
    dare,
    dlyap,
    is_stabilizing,
    spectral_radius,
)
from .domain import (
    ParamDistribution,
    SampleSet,
    SystemFamily,
    affine_family,
    draw_samples,
    hoeffding_halfwidth,
    mc_dr_cost,
    pendulum_family,
    sample_avg_cost,
    sample_avg_gradient,
)
from .lqr import LqrEval, lqr_cost, lqr_eval
from .optimizer import (
    AnnealSchedule,
    PgConfig,
    RiskConfig,
    Trace,
    discount_annealing,
    entropic_pg,
    entropic_risk,
    policy_gradient,
    sgd,
)
from .systems import CostSpec, LinearSystem, normalize

__all__ = [
    "AnnealSchedule",
    "ConvergenceError",
    "CostSpec",
    "DareSolution",
    "InstabilityError",
    "LinearSystem",
    "LqrEval",
    "ParamDistribution",
    "PgConfig",
    "RiskConfig",
    "SampleSet",
    "SolveReport",
    "SystemFamily",
    "Trace",
    "affine_family",
    "dare",
    "discount_annealing",
    "dlyap",
    "draw_samples",
    "entropic_pg",
    "entropic_risk",
    "hoeffding_halfwidth",
    "is_stabilizing",
    "lqr_cost",
    "lqr_eval",
    "mc_dr_cost",
    "normalize",
    "pendulum_family",
    "policy_gradient",
    "sample_avg_cost",
    "sample_avg_gradient",
    "sgd",
    "spectral_radius",
]

__version__ = "0.1.0"
