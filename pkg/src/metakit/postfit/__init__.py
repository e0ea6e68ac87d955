"""Post-fit inference: marginal means, contrasts, predictions, diagnostics."""

from .diagnostics import (BaujatPoint, Prediction, baujat, casewise_diagnostics, predict_effects,
                          profile_tau2, residual_funnel)
from .emm import (EMMRow, contrasts, contrasts_scale, emm, emm_continuous, emm_scale, emm_table,
                  reference_vector)

__all__ = ["BaujatPoint", "Prediction", "baujat", "casewise_diagnostics", "predict_effects", "profile_tau2",
           "residual_funnel", "EMMRow", "contrasts", "contrasts_scale", "emm", "emm_continuous", "emm_scale",
           "emm_table", "reference_vector"]
