"""Localized conformal prediction.

Prediction intervals that weight calibration scores by a kernel centered at
the test point and recalibrate the quantile level so marginal coverage holds
in finite samples.
"""

from .calibration import (CalibrationModel, G2Witness, LocalizedProblem, NoFeasibleLevel,
                          default_alpha_grid, eval_G1, eval_G2, grid_search_alpha,
                          randomized_alpha, search_alpha)
from .core import INF, WeightedAtomSet, augmented, cdf_at, substitute_atom, weighted_quantile
from .intervals import (AbsResidual, CustomScore, GridSet, Interval, exact_lcp_set_datadep,
                        identity_predictor, lcp_interval, lcp_set_generic, lcp_threshold,
                        local_coverage_interval, naive_interval, split_conformal_interval,
                        split_conformal_threshold, weighted_conformal_interval,
                        weighted_conformal_threshold)
from .localizers import (LocalizerSpec, build_local_weights, eval_localizer, localizer_matrix,
                         select_projection_axis)
from .tuning import TuningError, TuningReport, loo_thresholds, tune_bandwidth

__version__ = "0.1.0"

__all__ = [
    "INF", "AbsResidual", "CalibrationModel", "CustomScore", "G2Witness", "GridSet",
    "Interval", "LocalizedProblem", "LocalizerSpec", "NoFeasibleLevel", "TuningError",
    "TuningReport", "WeightedAtomSet", "augmented", "build_local_weights", "cdf_at",
    "default_alpha_grid", "eval_G1", "eval_G2", "eval_localizer", "exact_lcp_set_datadep",
    "grid_search_alpha", "identity_predictor", "lcp_interval", "lcp_set_generic",
    "lcp_threshold", "local_coverage_interval", "localizer_matrix", "loo_thresholds",
    "naive_interval", "randomized_alpha", "search_alpha", "select_projection_axis",
    "split_conformal_interval", "split_conformal_threshold", "substitute_atom",
    "tune_bandwidth", "weighted_conformal_interval", "weighted_conformal_threshold",
    "weighted_quantile",
]
