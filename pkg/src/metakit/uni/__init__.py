"""Univariate models: fixed/random/mixed effects, location-scale, subgroups, MH/Peto."""

from .estimators import METHODS, Interval, Tau2Estimate, ci_tau2_qprofile, estimate_tau2, se_tau2
from .mh import PooledResult, fit_mh, fit_peto, tables_from_columns
from .model import (UniFit, UniModelSpec, WaldTest, ci_tau2, fit_uni, heterogeneity_stats,
                    pooled_estimate, prediction_interval, refit, transform_estimates, wald_test)
from .scale import ScaleFit, fit_location_scale
from .subgroup import SubgroupResult, between_group_q, subgroup_analysis

__all__ = [
    "METHODS", "Interval", "Tau2Estimate", "ci_tau2_qprofile", "estimate_tau2", "se_tau2",
    "PooledResult", "fit_mh", "fit_peto", "tables_from_columns",
    "UniFit", "UniModelSpec", "WaldTest", "ci_tau2", "fit_uni", "heterogeneity_stats",
    "pooled_estimate", "prediction_interval", "refit", "transform_estimates", "wald_test",
    "ScaleFit", "fit_location_scale", "SubgroupResult", "between_group_q", "subgroup_analysis",
]
