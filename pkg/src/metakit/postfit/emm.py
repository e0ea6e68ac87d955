"""Estimated marginal means and pairwise contrasts."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import DomainError, SchemaError
from ..ingest import CATEGORICAL, REAL
from ..kernel import parse_term
from ..tables import ResultTable

WEIGHTINGS = ("weighted", "unweighted")
ADJUSTMENTS = ("none", "bonferroni", "holm")


@dataclass
class EMMRow:
    level: object
    estimate: float
    se: float
    ci_lower: float
    ci_upper: float
    stat: float
    df: float | None
    p: float
    c: np.ndarray | None = None


@dataclass
class _Inference:
    """Coefficients, covariance and df rule of a location or scale model."""
    b: np.ndarray
    cov: np.ndarray
    info: object
    data: object
    df_of: object          # c -> df or None (normal)
    level: float = 0.95


def _location(fit, robust=None, data=None):
    data = data if data is not None else getattr(fit, "data", None)
    level = getattr(getattr(fit, "spec", None), "ci_level", getattr(fit, "ci_level", 0.95))
    if robust is not None:
        return _Inference(fit.b, robust.cov_robust, fit.design, data, robust.satterthwaite_df, level)
    return _Inference(fit.b, fit.cov_b, fit.design, data, lambda c: fit.ddf, level)


def _scale(fit, data=None):
    sf = fit.scale
    if sf is None:
        raise SchemaError("fit has no scale model")
    data = data if data is not None else fit.data
    return _Inference(sf.alpha, sf.cov_alpha, sf.design, data, lambda c: None, fit.spec.ci_level)


def _values(inf, var):
    if inf.data is None:
        raise SchemaError("marginal means need the fitted data (pass data=...)")
    return inf.data[var]


def reference_vector(inf: _Inference, fixed: dict, weighting="weighted"):
    """Average design row with the variables in ``fixed`` set to given values.

    ``weighted`` averages over the observed rows (frequency weights);
    ``unweighted`` gives each combination of the remaining factors' levels
    equal weight, with covariates at their arithmetic means.
    """
    if weighting not in WEIGHTINGS:
        raise SchemaError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")
    info = inf.info
    if info is None or not info.kinds:
        return np.ones(len(inf.b))
    others = [v for v in info.kinds if v not in fixed]
    if weighting == "weighted":
        n = len(inf.data) if inf.data is not None else 0
        if others and n == 0:
            raise SchemaError("marginal means need the fitted data (pass data=...)")
        n = max(n, 1)
        vals = {v: _values(inf, v) for v in others}
        for v, x in fixed.items():
            vals[v] = [x] * n
        return info.encode(vals).mean(axis=0)
    cats = [v for v in others if info.kinds[v] == CATEGORICAL]
    reals = [v for v in others if info.kinds[v] == REAL]
    combos = list(itertools.product(*[info.levels[v] for v in cats])) or [()]
    n = len(combos)
    vals = {v: [c[i] for c in combos] for i, v in enumerate(cats)}
    for v in reals:
        vals[v] = [float(np.mean(np.asarray(_values(inf, v), dtype=float)))] * n
    for v, x in fixed.items():
        vals[v] = [x] * n
    return info.encode(vals).mean(axis=0)


def _row(inf, level, c, test_against):
    est = float(c @ inf.b)
    se = math.sqrt(float(c @ inf.cov @ c))
    df = inf.df_of(c)
    stat = (est - test_against) / se if se > 0 else math.nan
    if df is None:
        q = stats.norm.ppf(0.5 + inf.level / 2)
        p = 2 * stats.norm.sf(abs(stat))
    else:
        q = stats.t.ppf(0.5 + inf.level / 2, df)
        p = 2 * stats.t.sf(abs(stat), df)
    return EMMRow(level, est, se, est - q * se, est + q * se, float(stat), df, float(p), c)


def _focal(inf, term):
    vars_ = parse_term(term)
    info = inf.info
    if info is None or not vars_ or any(v not in info.kinds for v in vars_):
        raise SchemaError(f"term {term!r} is not in the model")
    return vars_


def _focal_levels(inf, vars_):
    info = inf.info
    for v in vars_:
        if info.kinds[v] != CATEGORICAL:
            raise SchemaError(f"{v!r} is continuous; use emm_continuous")
    return list(itertools.product(*[info.levels[v] for v in vars_]))


def _label(combo):
    return combo[0] if len(combo) == 1 else ":".join(combo)


def emm(fit, term=None, weighting="weighted", test_against=0.0, robust=None, data=None):
    """Marginal means at each level of a categorical ``term`` (or the overall
    mean when ``term`` is None)."""
    inf = _location(fit, robust, data)
    return _emm(inf, term, weighting, test_against)


def _emm(inf, term, weighting, test_against):
    if term is None:
        c = reference_vector(inf, {}, weighting)
        return [_row(inf, "overall", c, test_against)]
    vars_ = _focal(inf, term)
    out = []
    for combo in _focal_levels(inf, vars_):
        c = reference_vector(inf, dict(zip(vars_, combo)), weighting)
        out.append(_row(inf, _label(combo), c, test_against))
    return out


def emm_continuous(fit, term, weighting="weighted", test_against=0.0, robust=None, data=None):
    """Marginal means at mean - sd and mean + sd of a continuous moderator."""
    inf = _location(fit, robust, data)
    (var,) = _focal(inf, term)
    if inf.info.kinds[var] != REAL:
        raise SchemaError(f"{var!r} is categorical; use emm")
    x = np.asarray(_values(inf, var), dtype=float)
    m, sd = float(np.mean(x)), float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
    if not sd > 0:
        raise DomainError(f"moderator {var!r} has zero variance (degenerate moderator)")
    return [_row(inf, v, reference_vector(inf, {var: v}, weighting), test_against) for v in (m - sd, m + sd)]


def _adjust(p, method):
    p = np.asarray(p, dtype=float)
    m = len(p)
    if method == "none" or m == 0:
        return p
    if method == "bonferroni":
        return np.minimum(1.0, p * m)
    order = np.argsort(p, kind="stable")
    adj = np.empty(m)
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, (m - rank) * p[i])
        adj[i] = min(1.0, running)
    return adj


def contrasts(fit, term, weighting="weighted", adjust="none", robust=None, data=None) -> ResultTable:
    """All pairwise differences between the marginal means of ``term``."""
    if adjust not in ADJUSTMENTS:
        raise SchemaError(f"unknown adjustment {adjust!r}; expected one of {ADJUSTMENTS}")
    inf = _location(fit, robust, data)
    return _contrasts(inf, term, weighting, adjust)


def _contrasts(inf, term, weighting, adjust, name="contrasts"):
    rows = _emm(inf, term, weighting, 0.0)
    if len(rows) < 2:
        raise SchemaError(f"term {term!r} needs at least 2 levels for contrasts")
    tab = ResultTable(name, ["comparison", "estimate", "se", "stat", "df", "p", "ci_lower", "ci_upper"],
                      title=f"Contrasts: {term}")
    res = []
    for r1, r2 in itertools.combinations(rows, 2):
        c = r1.c - r2.c
        res.append((f"{r1.level} - {r2.level}", _row(inf, None, c, 0.0)))
    padj = _adjust([r.p for _, r in res], adjust)
    for (lab, r), pa in zip(res, padj):
        tab.add_row(comparison=lab, estimate=r.estimate, se=r.se, stat=r.stat, df=r.df, p=float(pa),
                    ci_lower=r.ci_lower, ci_upper=r.ci_upper)
    if adjust != "none":
        tab.footnotes.append(f"p-values adjusted ({adjust}).")
    return tab


def emm_scale(fit, term=None, weighting="weighted", test_against=0.0, data=None):
    """Marginal means of the heterogeneity model.

    Computed for ``log(tau2)`` and reported as ``tau2`` with monotonically
    transformed interval endpoints. ``test_against`` is on the log scale.
    """
    inf = _scale(fit, data)
    rows = _emm(inf, term, weighting, test_against)
    return [EMMRow(r.level, math.exp(r.estimate), r.se, math.exp(r.ci_lower), math.exp(r.ci_upper),
                   r.stat, r.df, r.p, r.c) for r in rows]


def contrasts_scale(fit, term, weighting="weighted", adjust="none", data=None) -> ResultTable:
    """Pairwise contrasts of the heterogeneity model on the log scale."""
    return _contrasts(_scale(fit, data), term, weighting, adjust)


def emm_table(rows, name="emm", title="Estimated Marginal Means", transformed=False) -> ResultTable:
    tab = ResultTable(name, ["level", "estimate", "se", "ci_lower", "ci_upper", "stat", "df", "p"], title=title)
    for r in rows:
        tab.add_row(level=r.level, estimate=r.estimate, se=r.se, ci_lower=r.ci_lower, ci_upper=r.ci_upper,
                    stat=r.stat, df=r.df, p=r.p)
    if transformed:
        tab.footnotes.append("Estimates and intervals transformed; standard errors on the model scale.")
    return tab
