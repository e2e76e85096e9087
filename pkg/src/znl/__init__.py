"""Zero-noise selection lab: small-noise limits of ODEs whose drift jumps across x_d = 0."""

from __future__ import annotations

from .dsl import Scenario, load_scenario, parse_expr, parse_scenario
from .field import CaseLabel, DriftField, LinearizationCoeffs, classify_case, estimate_c_pm
from .integrate import (
    NoiseRecord,
    Path,
    euler_maruyama,
    hitting_time_H,
    integrate_branch,
    integrate_coupled_limit,
    integrate_sliding_ode,
    reflection_map,
)
from .montecarlo import (
    EstimateWithCI,
    SweepRow,
    coupled_convergence_check,
    eps_sweep,
    estimate_confinement,
    estimate_ks,
    estimate_occupation,
    estimate_one_sided,
    estimate_selection,
    estimate_sliding,
    ks_distance,
    prehitting_coupling,
    sup_error,
    wilson_ci,
)
from .predict import (
    arcsine_cdf,
    example_terminal_cdf,
    exit_prob_two_sided,
    occupation_fraction,
    selection_probabilities,
)

__all__ = [
    "CaseLabel", "DriftField", "EstimateWithCI", "LinearizationCoeffs", "NoiseRecord", "Path",
    "Scenario", "SweepRow", "arcsine_cdf", "classify_case", "coupled_convergence_check", "eps_sweep",
    "estimate_c_pm", "estimate_confinement", "estimate_ks", "estimate_occupation", "estimate_one_sided",
    "estimate_selection", "estimate_sliding",
    "euler_maruyama", "example_terminal_cdf", "exit_prob_two_sided", "hitting_time_H",
    "integrate_branch", "integrate_coupled_limit", "integrate_sliding_ode", "ks_distance",
    "load_scenario", "occupation_fraction", "parse_expr", "parse_scenario", "prehitting_coupling",
    "reflection_map",
    "selection_probabilities", "sup_error", "wilson_ci",
]
