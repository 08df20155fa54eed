"""Numerical laboratory for maximal propagation speed bounds of Schrodinger dynamics."""
from .config import ExperimentConfig, config_from_dict, parse_config
from .experiments import ExperimentResult, run_experiment
from .fitting import DecayFit, fit_decay
from .funcalc import SpectralCutoff, compute_k, hs_apply, spectral_apply
from .grid import GridSpec, WaveFunction, gaussian_packet
from .hamiltonian import HamiltonianOp, PotentialSpec, TimeDepPotentialSpec
from .propagator import PropagatorConfig, evolve, exact_free_gaussian

__all__ = [
    "DecayFit", "ExperimentConfig", "ExperimentResult", "GridSpec", "HamiltonianOp",
    "PotentialSpec", "PropagatorConfig", "SpectralCutoff", "TimeDepPotentialSpec", "WaveFunction",
    "compute_k", "config_from_dict", "evolve", "exact_free_gaussian", "fit_decay", "gaussian_packet",
    "hs_apply", "parse_config", "run_experiment", "spectral_apply",
]
