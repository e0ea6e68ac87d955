"""Predictions, casewise influence diagnostics, Baujat data, likelihood profiles."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import InsufficientDataError, MetakitError, SchemaError
from ..kernel import reml_loglik, wls_fit
from ..tables import ResultTable
from ..uni.model import UniFit, refit


@dataclass
class Prediction:
    pred: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    pi_lower: np.ndarray
    pi_upper: np.ndarray
    tau2: np.ndarray


def _design_rows(fit, rows):
    if rows is None:
        return fit.X
    if isinstance(rows, dict):
        if fit.design is None:
            raise SchemaError("fit has no design information; pass design rows")
        try:
            return fit.design.encode(rows)
        except SchemaError as e:
            raise SchemaError(f"cannot predict: {e}") from None
    X = np.atleast_2d(np.asarray(rows, dtype=float))
    if X.shape[1] != fit.p:
        raise SchemaError(f"design rows have {X.shape[1]} columns, model has {fit.p}")
    return X


def predict_effects(fit, rows=None, scale_rows=None, level=None, cov=None, df=None) -> Prediction:
    """Predicted effects with confidence and prediction intervals.

    ``rows`` is either a ``variable -> values`` mapping or raw design rows
    (the fitted rows when omitted). For location-scale fits the heterogeneity
    of each row is ``exp(z'alpha)`` with ``z`` from ``scale_rows`` (the
    fitted scale design when omitted).
    """
    X = _design_rows(fit, rows)
    level = level if level is not None else getattr(getattr(fit, "spec", None), "ci_level", 0.95)
    cov = fit.cov_b if cov is None else cov
    n = X.shape[0]
    pred = X @ fit.b
    var = np.einsum("ij,jk,ik->i", X, cov, X)
    sf = getattr(fit, "scale", None)
    if sf is not None:
        if scale_rows is None:
            Z = sf.Z if rows is None else None
            if Z is None and isinstance(rows, dict) and sf.design is not None:
                Z = sf.design.encode(rows)
            if Z is None:
                raise SchemaError("location-scale prediction needs scale design rows")
        elif isinstance(scale_rows, dict):
            Z = sf.design.encode(scale_rows)
        else:
            Z = np.atleast_2d(np.asarray(scale_rows, dtype=float))
        tau2 = sf.tau2_at(Z)
    else:
        tau2 = np.full(n, fit.tau2)
    ddf = fit.ddf if df is None else df
    q = stats.t.ppf(0.5 + level / 2, ddf) if ddf is not None else stats.norm.ppf(0.5 + level / 2)
    se = np.sqrt(var)
    h_pi = q * np.sqrt(var + tau2)
    return Prediction(pred, se, pred - q * se, pred + q * se, pred - h_pi, pred + h_pi, tau2)


def _loo(fit: UniFit):
    out = []
    for i in range(fit.k):
        keep = np.ones(fit.k, bool)
        keep[i] = False
        try:
            out.append(refit(fit, keep))
        except MetakitError as e:
            out.append(e)
    return out


def casewise_diagnostics(fit: UniFit, loo=None) -> ResultTable:
    """Residuals and leave-one-out influence measures per row."""
    k, p = fit.k, fit.p
    if k <= p + 1:
        raise InsufficientDataError("leave-one-out diagnostics need k > p + 1")
    M = fit.v + fit.row_tau2()
    w = wls_fit(fit.y, fit.X, M)
    H = w.hat
    resid = w.residuals
    ImH = np.eye(k) - H
    var_e = np.diag(ImH @ np.diag(M) @ ImH.T)
    rstandard = resid / np.sqrt(var_e)
    inv_cov = np.linalg.inv(fit.cov_b)
    loo = _loo(fit) if loo is None else loo
    weights = 100.0 * (1 / M) / np.sum(1 / M)
    tab = ResultTable("diagnostics",
                      ["row_id", "rstandard", "rstudent", "hat", "weight", "cooks_d",
                       *[f"dfbetas[{n}]" for n in fit.column_names], "loo_tau2", "loo_QE", "flag"],
                      title="Casewise Diagnostics")
    ids = fit.row_ids if fit.row_ids is not None else np.arange(k)
    for i in range(k):
        r = loo[i]
        row = dict(row_id=int(ids[i]), rstandard=float(rstandard[i]), hat=float(H[i, i]),
                   weight=float(weights[i]))
        if isinstance(r, Exception):
            row["flag"] = f"leave-one-out refit failed: {r}"
            tab.add_row(**row)
            continue
        x = fit.X[i]
        delpred = float(x @ r.b)
        vdel = fit.v[i] + r.tau2 + float(x @ r.cov_b @ x)
        db = fit.b - r.b
        row.update(rstudent=(fit.y[i] - delpred) / math.sqrt(vdel),
                   cooks_d=float(db @ inv_cov @ db), loo_tau2=r.tau2, loo_QE=r.QE, flag="")
        dfb = db / np.sqrt(np.diag(r.cov_b))
        for n, val in zip(fit.column_names, dfb):
            row[f"dfbetas[{n}]"] = float(val)
        tab.add_row(**row)
    return tab


@dataclass
class BaujatPoint:
    row_id: int
    x: float
    y: float


def baujat(fit: UniFit, loo=None):
    """Per-row contribution to QE (x) and squared standardized shift of the
    fitted value when the row is left out (y)."""
    fe = wls_fit(fit.y, fit.X, fit.v, need_hat=False)
    xq = fe.residuals**2 / fit.v
    loo = _loo(fit) if loo is None else loo
    ids = fit.row_ids if fit.row_ids is not None else np.arange(fit.k)
    out = []
    for i in range(fit.k):
        r = loo[i]
        if isinstance(r, Exception):
            out.append(BaujatPoint(int(ids[i]), float(xq[i]), math.nan))
            continue
        x = fit.X[i]
        yv = float(x @ (fit.b - r.b)) ** 2 / float(x @ r.cov_b @ x)
        out.append(BaujatPoint(int(ids[i]), float(xq[i]), yv))
    return out


def profile_tau2(fit: UniFit, grid):
    """Restricted log-likelihood over a grid of tau2 values (b profiled out)."""
    grid = np.asarray(grid, dtype=float)
    if np.any(grid < 0):
        raise SchemaError("tau2 grid must be nonnegative")
    return np.array([reml_loglik(fit.y, fit.X, fit.v + t) for t in grid])


def residual_funnel(fit):
    """(residual, sei) pairs for the residual funnel."""
    if fit.k <= fit.p:
        raise InsufficientDataError("saturated model: no residual funnel")
    res = fit.y - fit.X @ fit.b
    return res, np.sqrt(fit.v)
