"""Stratified fits with a between-group test of pooled-effect equality."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..errors import InsufficientDataError, MetakitError
from .model import UniModelSpec, fit_uni


@dataclass
class SubgroupResult:
    fits: dict                  # level -> UniFit
    Q_between: float
    df: int
    p: float
    excluded: dict = field(default_factory=dict)   # level -> reason
    flags: list = field(default_factory=list)

    def estimates(self):
        """``level -> (estimate, se)`` for the included groups."""
        return {g: (float(f.b[0]), float(f.se[0])) for g, f in self.fits.items()}


def between_group_q(est, se):
    """Wald-type ``Q = sum w_g (mu_g - mu_bar)^2`` with ``w_g = 1/se_g^2``."""
    est = np.asarray(est, dtype=float)
    w = 1.0 / np.asarray(se, dtype=float) ** 2
    mu = np.sum(w * est) / np.sum(w)
    return float(np.sum(w * (est - mu) ** 2))


def subgroup_analysis(spec: UniModelSpec, y, v, groups, row_ids=None) -> SubgroupResult:
    """Fit an intercept-only model within each level of ``groups``.

    Each group gets its own heterogeneity estimate. Groups too small to fit
    are reported in ``excluded`` and left out of the between-group test.
    The test uses each group's own SE (so KH-scaled SEs under KH).
    """
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    groups = np.asarray(groups, dtype=object)
    spec = UniModelSpec(method=spec.method, test=spec.test, fixed_tau2=spec.fixed_tau2,
                        ci_level=spec.ci_level, truncate_kh=spec.truncate_kh, transform=spec.transform)
    levels = sorted({g for g in groups if g is not None}, key=lambda s: str(s).encode("utf-8"))
    fits, excluded, flags = {}, {}, []
    for g in levels:
        m = groups == g
        try:
            fits[g] = fit_uni(spec, y[m], v[m], row_ids=None if row_ids is None else np.asarray(row_ids)[m])
        except (InsufficientDataError, MetakitError) as e:
            excluded[g] = str(e)
            flags.append(f"group {g!r} excluded from the between-group test: {e}")
    if len(fits) < 2:
        return SubgroupResult(fits, math.nan, 0, math.nan, excluded, flags + ["fewer than two groups; no test"])
    est = [f.b[0] for f in fits.values()]
    se = [f.se[0] for f in fits.values()]
    Q = between_group_q(est, se)
    df = len(fits) - 1
    return SubgroupResult(fits, Q, df, float(stats.chi2.sf(Q, df)), excluded, flags)
