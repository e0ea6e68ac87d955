"""Between-study variance estimators and the Q-profile interval."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from ..errors import InsufficientDataError, SchemaError
from ..kernel import ml_loglik, reml_loglik, wls_fit

METHODS = ("REML", "ML", "DL", "PM", "HE", "FE")
TAU2_TOL = 1e-10


@dataclass
class Tau2Estimate:
    tau2: float
    flags: list = field(default_factory=list)


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float
    flags: tuple = ()

    def contains(self, other, tol=0.0):
        return self.lower <= other.lower + tol and other.upper <= self.upper + tol


def _as_X(X, k):
    if X is None:
        return np.ones((k, 1))
    X = getattr(X, "X", X)
    return np.asarray(X, dtype=float)


def q_generalized(tau2, y, v, X):
    """Residual Q with weights ``1/(v + tau2)``."""
    return wls_fit(y, X, v + tau2, need_hat=False).rss_weighted


def _projection_trace(v, X):
    w = 1.0 / v
    XtW = X.T * w
    A = np.linalg.solve(XtW @ X, XtW * w) if X.shape[1] else np.zeros((0, len(v)))
    return w.sum() - np.trace(A @ X) if X.shape[1] else w.sum()


def _upper_bound(y):
    return max(10.0 * float(np.var(y, ddof=1)) if len(y) > 1 else 0.0, 1e-4)


def _maximize(loglik, upper):
    """Bounded Brent search on [0, upper], expanding upper when the optimum hugs it."""
    for _ in range(60):
        res = optimize.minimize_scalar(lambda t: -loglik(t), bounds=(0.0, upper), method="bounded",
                                       options={"xatol": TAU2_TOL, "maxiter": 500})
        t = float(res.x)
        if t < upper * (1 - 1e-6):
            break
        upper *= 10.0
    if loglik(0.0) >= loglik(t):
        return 0.0
    # polish with a secant on the numerical score so the optimum is not just
    # within xatol but at machine-level stationarity
    h = max(1e-7, 1e-5 * t)
    for _ in range(20):
        lo, hi = max(t - h, 0.0), t + h
        g = (loglik(hi) - loglik(lo)) / (hi - lo)
        c = (loglik(hi) - 2 * loglik(t) + loglik(lo)) / h**2 if lo > 0 else None
        if c is None or c >= 0:
            break
        step = -g / c
        t_new = max(t + step, 0.0)
        if loglik(t_new) < loglik(t) - 1e-12:
            break
        if abs(t_new - t) < 1e-14 * max(1.0, t):
            t = t_new
            break
        t = t_new
    return t


def estimate_tau2(method, y, v, X=None, upper=None) -> Tau2Estimate:
    """Estimate the residual heterogeneity variance.

    ``method`` is one of REML, ML, DL, PM, HE, FE. Moment estimators are
    truncated at zero; likelihood estimators search ``[0, upper]`` (default
    ``10 * var(y)``, widened automatically if the optimum sits on it).
    """
    if method not in METHODS:
        raise SchemaError(f"unknown method {method!r}; expected one of {METHODS}")
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    k = len(y)
    X = _as_X(X, k)
    p = X.shape[1]
    if np.any(~(v > 0)):
        raise SchemaError("sampling variances must be positive")
    if k <= p:
        raise InsufficientDataError(f"need more studies than coefficients (k={k}, p={p})")
    if method == "FE":
        return Tau2Estimate(0.0)
    if method == "DL":
        Q = q_generalized(0.0, y, v, X)
        return Tau2Estimate(max(0.0, (Q - (k - p)) / _projection_trace(v, X)))
    if method == "HE":
        P0 = np.eye(k) - X @ np.linalg.solve(X.T @ X, X.T)
        rss = float(y @ P0 @ y)
        return Tau2Estimate(max(0.0, (rss - float(np.trace(P0 * v))) / (k - p)))
    upper = upper if upper is not None else _upper_bound(y)
    if method == "PM":
        target = k - p

        def f(t):
            return q_generalized(t, y, v, X) - target

        if f(0.0) <= 0:
            return Tau2Estimate(0.0)
        hi = upper
        for _ in range(60):
            if f(hi) < 0:
                break
            hi *= 2.0
        else:
            return Tau2Estimate(hi, ["PM: no sign change, boundary returned"])
        return Tau2Estimate(optimize.brentq(f, 0.0, hi, xtol=TAU2_TOL * 1e-2, rtol=1e-14, maxiter=500))
    ll = reml_loglik if method == "REML" else ml_loglik
    return Tau2Estimate(_maximize(lambda t: ll(y, X, v + t), upper))


def se_tau2(method, tau2, y, v, X):
    """Standard error of the heterogeneity estimate.

    Likelihood methods use the expected information; DL and HE use the exact
    variance of their quadratic form under normality; PM has no closed form
    and returns NaN.
    """
    k, p = X.shape
    if method == "FE":
        return math.nan
    if method in ("REML", "ML"):
        w = 1.0 / (v + tau2)
        if method == "ML":
            return math.sqrt(2.0 / np.sum(w**2))
        P = _proj(w, X)
        return math.sqrt(2.0 / np.sum(P * P.T))
    S = v + tau2
    if method == "DL":
        P = _proj(1.0 / v, X)
        denom = np.trace(P)
    elif method == "HE":
        P = np.eye(k) - X @ np.linalg.solve(X.T @ X, X.T)
        denom = k - p
    else:
        return math.nan
    PS = P * S
    return math.sqrt(2.0 * np.sum(PS * PS.T)) / denom


def _proj(w, X):
    W = np.diag(w)
    WX = X * w[:, None]
    return W - WX @ np.linalg.solve(X.T @ WX, WX.T)


def ci_tau2_qprofile(y, v, X=None, level=0.95) -> Interval:
    """Q-profile interval: endpoints where the generalized Q hits chi-square quantiles."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    X = _as_X(X, len(y))
    k, p = X.shape
    if k <= p:
        raise InsufficientDataError(f"need more studies than coefficients (k={k}, p={p})")
    df = k - p
    alpha = 1.0 - level
    q_lo = stats.chi2.ppf(1 - alpha / 2, df)
    q_hi = stats.chi2.ppf(alpha / 2, df)
    Q0 = q_generalized(0.0, y, v, X)
    flags = []

    def solve(target):
        f = lambda t: q_generalized(t, y, v, X) - target
        hi = _upper_bound(y)
        for _ in range(200):
            if f(hi) < 0:
                break
            hi *= 2.0
        else:
            return math.inf
        return optimize.brentq(f, 0.0, hi, xtol=1e-14, rtol=1e-13, maxiter=1000)

    if Q0 < q_lo:
        lower = 0.0
        flags.append("lower bound truncated at 0")
    else:
        lower = solve(q_lo)
    if Q0 < q_hi:
        upper = 0.0
        flags.append("upper bound truncated at 0")
    else:
        upper = solve(q_hi)
        if math.isinf(upper):
            flags.append("upper bound open")
    return Interval(lower, upper, tuple(flags))
