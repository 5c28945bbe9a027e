"""Moment-based inference for partially observed multi-type branching processes."""

__version__ = "0.1.0"

from .estimator import (
    FitConfig,
    FitError,
    FitResult,
    IdentifiabilityWarning,
    LossContext,
    empirical_correlations,
    fit,
    loss,
)
from .expsum import ExpSum, solve_linear_ode
from .model import ModelTopology, Params, canonical_model, make_topology, reference_truth, param_names
from .moments import (
    build_moment_set,
    latent_moments,
    model_correlations,
    observed_moments,
    ode_oracle,
)
from .simulator import (
    STANDARD_SCHEDULE,
    ReadDataset,
    SimConfig,
    mvhypergeom_sample,
    simulate_dataset,
    simulate_lineage,
    simulate_lineages,
)
from .validation import BootstrapResult, CVResult, StudySpec, bootstrap, cross_validate, simulation_study

__all__ = [
    "BootstrapResult",
    "CVResult",
    "ExpSum",
    "FitConfig",
    "FitError",
    "FitResult",
    "IdentifiabilityWarning",
    "LossContext",
    "ModelTopology",
    "STANDARD_SCHEDULE",
    "Params",
    "ReadDataset",
    "SimConfig",
    "StudySpec",
    "bootstrap",
    "build_moment_set",
    "canonical_model",
    "cross_validate",
    "empirical_correlations",
    "fit",
    "latent_moments",
    "loss",
    "make_topology",
    "model_correlations",
    "mvhypergeom_sample",
    "observed_moments",
    "ode_oracle",
    "reference_truth",
    "param_names",
    "simulate_dataset",
    "simulate_lineage",
    "simulate_lineages",
    "simulation_study",
    "solve_linear_ode",
]
