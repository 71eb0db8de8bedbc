"""Panel wage regressions corrected for attrition and employment selection."""

__version__ = "0.1.0"

from .data import (ModelSpec, PanelDataset, build_design_matrices, load_panel_csv, normalize_panel, validate_panel,
                   write_panel_csv)
from .dgp import DEFAULT_PARAMS, TrueParams, implied_sigma, simulate_panel
from .normal import DrawMatrix, bivariate_normal_cdf, generate_draws, inverse_mills
from .stage1 import (Stage1Config, Stage1Fit, Stage1Params, fit_stage1, implied_error_correlation,
                     simulated_loglik, stage1_standard_errors)
from .stage2 import (BootstrapConfig, correction_terms, fit_stage2, selection_gap, two_stage_bootstrap_se)

__all__ = [
    "ModelSpec", "PanelDataset", "build_design_matrices", "load_panel_csv", "normalize_panel", "validate_panel",
    "write_panel_csv", "DEFAULT_PARAMS", "TrueParams", "implied_sigma", "simulate_panel", "DrawMatrix",
    "bivariate_normal_cdf", "generate_draws", "inverse_mills", "Stage1Config", "Stage1Fit", "Stage1Params",
    "fit_stage1", "implied_error_correlation", "simulated_loglik", "stage1_standard_errors", "BootstrapConfig",
    "correction_terms", "fit_stage2", "selection_gap", "two_stage_bootstrap_se",
]
