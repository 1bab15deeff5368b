"""Numerical topological conjugacy for nonautonomous linear systems with
nonuniform exponential dichotomy and their quasilinear perturbations."""
from .sysdsl import SystemDefinition, load_system, load_system_file
from .flow import FlowEngine
from .dichotomy import (ConstantsBundle, fit_dichotomy, fit_growth, verify_constants,
                        pair_norms)
from .conditions import (ConditionReport, check_theorem1, check_theorem2, condition_report,
                         contraction_factor, diffeo_horizon, estimate_perturbation_constants,
                         green_integrals)
from .conjugacy import ConjugacyEngine, WeightedPath
from .verify import VerificationReport, make_samples, run_suite

__all__ = [
    "SystemDefinition", "load_system", "load_system_file", "FlowEngine",
    "ConstantsBundle", "fit_dichotomy", "fit_growth", "verify_constants", "pair_norms",
    "ConditionReport", "check_theorem1", "check_theorem2", "condition_report",
    "contraction_factor", "diffeo_horizon", "estimate_perturbation_constants",
    "green_integrals", "ConjugacyEngine", "WeightedPath", "VerificationReport",
    "make_samples", "run_suite",
]
