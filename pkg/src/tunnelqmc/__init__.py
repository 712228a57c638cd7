"""Tunneling in transverse-field Ising models: exact spectra, perturbative
path and loop analysis, and continuous-time world-line Monte Carlo."""

from . import ctqmc, divdiff, exactdiag, harness, model, perturbation, resolvent
from .errors import (CapabilityError, ConfigError, ContractViolation, DegeneratePathError,
                     InsufficientSamplingError, NumericalFailure)
from .model import (IsingProblem, all_down, all_up, make_frustrated_ring, make_shamrock,
                    make_uniform_ferromagnet)

__version__ = "0.1.0"

__all__ = [
    "ctqmc", "divdiff", "exactdiag", "harness", "model", "perturbation", "resolvent",
    "IsingProblem", "make_uniform_ferromagnet", "make_frustrated_ring", "make_shamrock",
    "all_up", "all_down",
    "ContractViolation", "CapabilityError", "NumericalFailure", "DegeneratePathError",
    "InsufficientSamplingError", "ConfigError",
]
