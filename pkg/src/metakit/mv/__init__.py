"""Dependent effect sizes: V construction and multilevel fitting."""

from .model import MVFit, ci_sigma_profile, fit_mv, inclusion_tests
from .vcov import (VcalcSpec, VMatrix, check_psd, indicator_cross, load_precomputed_V, nested_components,
                   save_V, vcalc)

__all__ = ["MVFit", "ci_sigma_profile", "fit_mv", "inclusion_tests", "VcalcSpec", "VMatrix", "check_psd",
           "indicator_cross", "load_precomputed_V", "nested_components", "save_V", "vcalc"]
