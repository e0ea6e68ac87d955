"""Mantel-Haenszel and Peto pooling of 2x2 tables."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import NotEstimableError, SchemaError
from ..escalc import TwoByTwo, compute_2x2

MH_MEASURES = ("RR", "OR", "RD")


@dataclass
class PooledResult:
    measure: str
    estimate: float          # log scale for RR/OR/Peto
    se: float
    z: float
    p: float
    ci_lower: float
    ci_upper: float
    k: int                   # tables supplied
    k_informative: int
    QE: float = math.nan
    QE_df: int = 0
    QEp: float = math.nan

    @property
    def exp(self):
        """Back-transformed (estimate, lower, upper) for ratio measures."""
        return math.exp(self.estimate), math.exp(self.ci_lower), math.exp(self.ci_upper)


def _arrays(tables):
    if not tables:
        raise SchemaError("no tables supplied")
    a = np.array([t.a for t in tables], dtype=float)
    b = np.array([t.b for t in tables], dtype=float)
    c = np.array([t.c for t in tables], dtype=float)
    d = np.array([t.d for t in tables], dtype=float)
    if np.any(np.array([a, b, c, d]) < 0) or not np.all(np.isfinite([a, b, c, d])):
        raise SchemaError("cell counts must be finite and nonnegative")
    return a, b, c, d


def _result(measure, est, se, k, k_inf, tables, level, yi=None, vi=None):
    z = est / se
    q = stats.norm.ppf(0.5 + level / 2)
    if yi is None:
        # heterogeneity of the per-table escalc estimates around the pooled value
        es = {"RR": "logRR", "OR": "logOR", "RD": "RD"}[measure]
        recs = [compute_2x2(t, es) for t in tables]
        yi = np.array([r.yi for r in recs if r.estimable])
        vi = np.array([r.vi for r in recs if r.estimable])
    QE = float(np.sum((yi - est) ** 2 / vi)) if len(yi) else math.nan
    dfq = max(len(yi) - 1, 0)
    QEp = float(stats.chi2.sf(QE, dfq)) if dfq > 0 else math.nan
    return PooledResult(measure, float(est), float(se), float(z), float(2 * stats.norm.sf(abs(z))),
                        float(est - q * se), float(est + q * se), k, k_inf, QE, dfq, QEp)


def fit_mh(tables, measure="OR", level=0.95) -> PooledResult:
    """Mantel-Haenszel pooled log RR, log OR or RD.

    Variances: Robins-Breslow-Greenland for the OR, Greenland-Robins for RR
    and RD. No continuity correction is applied to the pooled estimator.
    """
    if measure not in MH_MEASURES:
        raise SchemaError(f"unknown measure {measure!r}; expected one of {MH_MEASURES}")
    tables = list(tables)
    a, b, c, d = _arrays(tables)
    n1, n2 = a + b, c + d
    N = n1 + n2
    keep = (n1 > 0) & (n2 > 0)
    a, b, c, d, n1, n2, N = (x[keep] for x in (a, b, c, d, n1, n2, N))
    if measure == "OR":
        R, S = a * d / N, b * c / N
        P, Q = (a + d) / N, (b + c) / N
        sR, sS = R.sum(), S.sum()
        if sR <= 0 or sS <= 0:
            raise NotEstimableError("MH odds ratio not estimable: all tables non-informative")
        est = math.log(sR / sS)
        var = (np.sum(P * R) / (2 * sR**2) + np.sum(P * S + Q * R) / (2 * sR * sS)
               + np.sum(Q * S) / (2 * sS**2))
        k_inf = int(np.sum((R > 0) | (S > 0)))
    elif measure == "RR":
        R, S = a * n2 / N, c * n1 / N
        sR, sS = R.sum(), S.sum()
        if sR <= 0 or sS <= 0:
            raise NotEstimableError("MH risk ratio not estimable: all tables non-informative")
        est = math.log(sR / sS)
        var = np.sum((n1 * n2 * (a + c) - a * c * N) / N**2) / (sR * sS)
        k_inf = int(np.sum((a + c) > 0))
    else:
        W = n1 * n2 / N
        sW = W.sum()
        est = float(np.sum((a * n2 - c * n1) / N) / sW)
        var = np.sum((a * b * n2**3 + c * d * n1**3) / (n1 * n2 * N**2)) / sW**2
        k_inf = int(len(a))
        if var <= 0:
            raise NotEstimableError("MH risk difference variance is zero")
    return _result(measure, est, math.sqrt(var), len(tables), k_inf, tables, level)


def fit_peto(tables, level=0.95) -> PooledResult:
    """Peto one-step log odds ratio: ``sum(O - E) / sum(V)``, SE ``1/sqrt(sum V)``."""
    tables = list(tables)
    a, b, c, d = _arrays(tables)
    n1, n2 = a + b, c + d
    N = n1 + n2
    m1, m2 = a + c, b + d
    with np.errstate(invalid="ignore", divide="ignore"):
        E = n1 * m1 / N
        V = n1 * n2 * m1 * m2 / (N**2 * (N - 1))
    ok = np.isfinite(V) & (V > 0)
    if not ok.any():
        raise NotEstimableError("Peto odds ratio not estimable: all tables non-informative")
    sV = V[ok].sum()
    est = float(np.sum(a[ok] - E[ok]) / sV)
    yi, vi = (a[ok] - E[ok]) / V[ok], 1 / V[ok]
    return _result("PETO", est, 1 / math.sqrt(sV), len(tables), int(ok.sum()), tables, level, yi, vi)


def tables_from_columns(a, b, c, d):
    return [TwoByTwo(float(w), float(x), float(y), float(z)) for w, x, y, z in zip(a, b, c, d)]
