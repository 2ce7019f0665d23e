"""Exactly thermalised stochastic dynamics of the spin-boson model."""

from .config import ConfigError, RunConfig, load_config
from .ensemble import (EnsembleResult, LZSpec, asymptote_estimate, correlation_study,
                       diagnostics, lz_limit, modified_lz_limit, run_ensemble,
                       thermal_reference, variance_scan)
from .kernels import (BathSpec, DomainError, KernelTable, QuadratureError,
                      QuadratureSpec, TimeGrid, drude_k_eta_nu, eval_kernels,
                      spectral_density)
from .noise import (FilterSet, NoiseRealisation, ScalingSpec, build_filters,
                    derive_seed, rescale, sample_white, synthesize, synthesize_batch)
from .propagate import (SchemeSpec, SpinBosonDrive, heun_step, propagate_trajectory,
                        step_guided, step_normalised, step_original,
                        stratonovich_drift_real, thermalise)

__version__ = "0.1.0"

__all__ = [
    "BathSpec", "ConfigError", "DomainError", "EnsembleResult", "FilterSet",
    "KernelTable", "LZSpec", "NoiseRealisation", "QuadratureError", "QuadratureSpec",
    "RunConfig", "ScalingSpec", "SchemeSpec", "SpinBosonDrive", "TimeGrid",
    "asymptote_estimate", "build_filters", "correlation_study", "derive_seed",
    "diagnostics", "drude_k_eta_nu", "eval_kernels", "heun_step", "load_config",
    "lz_limit", "modified_lz_limit", "propagate_trajectory", "rescale", "run_ensemble",
    "sample_white", "spectral_density", "step_guided", "step_normalised",
    "step_original", "stratonovich_drift_real", "synthesize", "synthesize_batch",
    "thermal_reference", "thermalise", "variance_scan",
]
