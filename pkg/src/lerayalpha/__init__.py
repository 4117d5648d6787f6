"""Spectral Galerkin simulator for a stochastic Leray-alpha model of ideal
incompressible flow, in Fourier components.

The truncated dynamics live on the half-lattice 0 < ||k|| < N (conjugate
symmetry structural, incompressibility enforced by projection).  The package
provides the deterministic convective system, its Stratonovich and Ito
stochastic versions with energy-preserving multiplicative noise, the closed
evolution of the linear system's covariance matrices, and the change of
measure that turns weighted linear-ensemble statistics into nonlinear-system
statistics.
"""

from .config import SimConfig, load_config, make_initial, parse_config, parse_observable
from .covariance import (CovarianceState, TimeIntegratedCovariance, covariance_rhs,
                         cross_validate, evolve_covariance, mc_covariance)
from .dynamics import (diffusion_increment, interaction_table, ito_correction,
                       nonlinear_drift)
from .errors import ConfigError, ConsistencyError, DomainError, LerayAlphaError
from .girsanov import (GirsanovAccumulator, compare_measures, density, drift_shift_check,
                       girsanov_step, log_density, reweight_expectation)
from .integrators import (EnsembleResult, Scheme, TrajectoryRecord, det_rk4_step,
                          em_step, heun_step, run_ensemble, run_trajectory)
from .noise import (NoiseIncrement, NoiseParams, NoiseTape, proj_norm_sq,
                    sample_increment, scalar_increment)
from .spectral import (SpectralField, SpectrumLayout, in_half_lattice, philox,
                       project, projector_matrix)

__version__ = "0.1.0"

__all__ = [
    "SimConfig", "load_config", "make_initial", "parse_config", "parse_observable",
    "CovarianceState", "TimeIntegratedCovariance", "covariance_rhs", "cross_validate",
    "evolve_covariance", "mc_covariance",
    "diffusion_increment", "interaction_table", "ito_correction", "nonlinear_drift",
    "ConfigError", "ConsistencyError", "DomainError", "LerayAlphaError",
    "GirsanovAccumulator", "compare_measures", "density", "drift_shift_check",
    "girsanov_step", "log_density", "reweight_expectation",
    "EnsembleResult", "Scheme", "TrajectoryRecord", "det_rk4_step", "em_step",
    "heun_step", "run_ensemble", "run_trajectory",
    "NoiseIncrement", "NoiseParams", "NoiseTape", "proj_norm_sq",
    "sample_increment", "scalar_increment",
    "SpectralField", "SpectrumLayout", "in_half_lattice", "philox",
    "project", "projector_matrix",
    "__version__",
]
