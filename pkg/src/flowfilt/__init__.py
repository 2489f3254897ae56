"""Particle flow filtering by homotopy continuation of a Cramér-von Mises distance."""

__version__ = "0.1.0"

from .dirac import ParticleSet, bayes_reweight, effective_sample_size
from .distance import DistanceParams, distance, gradient, hessian, hessian_recursive
from .errors import (
    CoincidenceError,
    ContractError,
    FlowFiltError,
    FlowStalledError,
    UpdateImpossibleError,
)
from .filter import (
    DeterministicNoise,
    GaussianNoise,
    Scenario,
    SystemModel,
    baseline_sir,
    gaussian_particles,
    kalman_filter,
    predict,
    run_scenario,
    system_model,
    update,
)
from .flow import FlowConfig, FlowTrace, integrate_flow
from .homotopy import (
    LikelihoodModel,
    Schedule,
    effective_likelihood,
    flat_likelihood,
    gaussian_likelihood,
    user_likelihood,
)
from .reduction import reduce_particles

__all__ = [
    "ParticleSet", "bayes_reweight", "effective_sample_size",
    "DistanceParams", "distance", "gradient", "hessian", "hessian_recursive",
    "CoincidenceError", "ContractError", "FlowFiltError", "FlowStalledError", "UpdateImpossibleError",
    "DeterministicNoise", "GaussianNoise", "Scenario", "SystemModel", "baseline_sir", "gaussian_particles",
    "kalman_filter", "predict", "run_scenario", "system_model", "update",
    "FlowConfig", "FlowTrace", "integrate_flow",
    "LikelihoodModel", "Schedule", "effective_likelihood", "flat_likelihood", "gaussian_likelihood",
    "user_likelihood", "reduce_particles",
]
