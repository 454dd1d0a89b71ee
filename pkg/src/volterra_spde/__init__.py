"""Spectral-Galerkin simulator for a semilinear stochastic reaction-diffusion
equation with fading memory, with its short-memory limit, coupling
constructions, and a config-driven experiment harness."""

__version__ = "0.1.0"

from .spectral import Domain, Noise, Potential, check_dissipativity
from .memory import (
    CFLError,
    HistoryGrid,
    Kernel,
    check_admissible,
    rescale_kernel,
    weighted_norm,
)
from .dynamics import (
    OBSERVABLES,
    ExtendedState,
    SolverConfig,
    SystemSpec,
    energy_psi0,
    energy_psi1,
    make_state,
    simulate,
)
from .ensembles import run_ensemble, run_nudged_pair, run_sync_pair
from .coupling import (
    DistanceSpec,
    dist_dN,
    dist_dNbeta,
    tv_bound_from_shift,
    wasserstein_upper,
)
from .experiments import ExperimentConfig, ExperimentReport, RateFit
from .config import validate_config, validate_text

__all__ = [
    "Domain", "Noise", "Potential", "check_dissipativity",
    "CFLError", "HistoryGrid", "Kernel", "check_admissible", "rescale_kernel",
    "weighted_norm",
    "OBSERVABLES", "ExtendedState", "SolverConfig", "SystemSpec",
    "energy_psi0", "energy_psi1", "make_state", "simulate",
    "run_ensemble", "run_nudged_pair", "run_sync_pair",
    "DistanceSpec", "dist_dN", "dist_dNbeta", "tv_bound_from_shift",
    "wasserstein_upper",
    "ExperimentConfig", "ExperimentReport", "RateFit",
    "validate_config", "validate_text",
    "__version__",
]
