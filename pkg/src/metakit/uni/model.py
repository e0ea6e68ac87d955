"""Fixed-, random- and mixed-effects models for independent estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from ..errors import InsufficientDataError, SchemaError
from ..kernel import DesignMatrix, information_criteria, ml_loglik, reml_loglik, wls_fit
from .estimators import METHODS, Interval, ci_tau2_qprofile, estimate_tau2, q_generalized, se_tau2

TESTS = ("knapp_hartung", "wald_z")
TRANSFORMS = ("none", "exp", "tanh")


@dataclass(frozen=True)
class UniModelSpec:
    method: str = "REML"
    test: str = "knapp_hartung"
    fixed_tau2: float | None = None
    terms: tuple = ()
    intercept: bool = True
    scale_terms: tuple = ()
    transform: str = "none"
    ci_level: float = 0.95
    truncate_kh: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise SchemaError(f"unknown method {self.method!r}")
        if self.test not in TESTS:
            raise SchemaError(f"unknown test {self.test!r}")
        if self.transform not in TRANSFORMS:
            raise SchemaError(f"unknown transform {self.transform!r}")
        if not 0 < self.ci_level < 1:
            raise SchemaError("ci_level must lie in (0, 1)")
        if self.fixed_tau2 is not None and self.fixed_tau2 < 0:
            raise SchemaError("fixed_tau2 must be nonnegative")
        if self.scale_terms and self.method not in ("REML", "ML"):
            raise SchemaError("location-scale models need method REML or ML")


@dataclass
class WaldTest:
    stat: float
    df1: float
    df2: float | None
    p: float
    kind: str  # "F" or "chi2"


def wald_test(b, cov, idx, ddf=None):
    """Joint test that ``b[idx] == 0``; F with (m, ddf) when ``ddf`` is given."""
    idx = list(range(len(b)))[idx] if isinstance(idx, slice) else list(idx)
    m = len(idx)
    if m == 0:
        return WaldTest(math.nan, 0, ddf, math.nan, "F" if ddf else "chi2")
    bb = b[idx]
    Q = float(bb @ np.linalg.solve(cov[np.ix_(idx, idx)], bb))
    if ddf is not None:
        return WaldTest(Q / m, m, ddf, float(stats.f.sf(Q / m, m, ddf)), "F")
    return WaldTest(Q, m, None, float(stats.chi2.sf(Q, m)), "chi2")


@dataclass
class UniFit:
    spec: UniModelSpec
    y: np.ndarray
    v: np.ndarray
    X: np.ndarray
    b: np.ndarray
    cov_b: np.ndarray
    tau2: float
    se_tau2: float
    k: int
    p: int
    QE: float
    QE_df: int
    QEp: float
    QM: float
    QM_df: tuple
    QMp: float
    I2: float
    H2: float
    loglik: float
    fit_stats: dict
    kh_scale: float = 1.0
    ddf: float | None = None
    design: object = None
    row_ids: np.ndarray | None = None
    data: object = None
    tau2_i: np.ndarray | None = None
    scale: object = None
    flags: list = field(default_factory=list)

    @property
    def method(self):
        return self.spec.method

    @property
    def test(self):
        return "t" if self.ddf is not None else "z"

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov_b))

    @property
    def column_names(self):
        if self.design is not None:
            return list(self.design.column_names)
        return [f"x{j}" for j in range(self.p)]

    def crit(self, level=None):
        level = self.spec.ci_level if level is None else level
        a = 1 - level
        return stats.t.ppf(1 - a / 2, self.ddf) if self.ddf is not None else stats.norm.ppf(1 - a / 2)

    def stat_p(self, est, se, null=0.0):
        stat = (est - null) / se
        if self.ddf is not None:
            return stat, 2 * stats.t.sf(abs(stat), self.ddf)
        return stat, 2 * stats.norm.sf(abs(stat))

    def coef_table(self):
        se = self.se
        stat, p = self.stat_p(self.b, se)
        q = self.crit()
        return {"name": self.column_names, "estimate": self.b, "se": se, "stat": stat, "p": p,
                "ci_lower": self.b - q * se, "ci_upper": self.b + q * se, "df": self.ddf}

    def row_tau2(self):
        """Per-row heterogeneity (constant unless a scale model is attached)."""
        if self.tau2_i is not None:
            return self.tau2_i
        return np.full(self.k, self.tau2)

    def marginal_cov(self):
        return np.diag(self.v + self.row_tau2())

    def weights(self):
        return 1.0 / (self.v + self.row_tau2())

    def term_tests(self):
        """Omnibus Wald test per model term."""
        out = {}
        if self.design is None:
            return out
        for label, sl in self.design.term_slices.items():
            out[label] = wald_test(self.b, self.cov_b, sl, self.ddf)
        return out


def _as_X(X, k):
    if X is None:
        return np.ones((k, 1)), None
    if isinstance(X, DesignMatrix):
        return np.asarray(X.X, dtype=float), X.info
    return np.asarray(X, dtype=float), None


def moderator_index(X, info=None):
    """Columns tested by the omnibus test: everything but the intercept."""
    p = X.shape[1]
    if info is not None:
        return list(range(1, p)) if info.intercept else list(range(p))
    if p > 1 and np.allclose(X[:, 0], 1.0):
        return list(range(1, p))
    return [] if p == 1 and np.allclose(X[:, 0], 1.0) else list(range(p))


def heterogeneity_stats(tau2, v, X, QE=None, method="REML"):
    """(I2, H2).

    Random-effects fits compare tau2 with the typical sampling variance
    ``(k - p) / tr(P)`` (P the projection under weights ``1/v``). For a
    fixed-effect fit both measures come from QE instead.
    """
    k, p = X.shape
    if method == "FE":
        if QE is None:
            QE = q_generalized(0.0, np.zeros(k), v, X)
        df = k - p
        I2 = max(0.0, 100.0 * (QE - df) / QE) if QE > 0 else 0.0
        return I2, QE / df if df > 0 else math.nan
    w = 1.0 / v
    WX = X * w[:, None]
    trP = w.sum() - np.trace(np.linalg.solve(X.T @ WX, WX.T @ WX))
    s2 = (k - p) / trP
    return 100.0 * tau2 / (tau2 + s2), (tau2 + s2) / s2


def fit_uni(spec: UniModelSpec, y, v, X=None, data=None, row_ids=None) -> UniFit:
    """Fit ``y_i = x_i'b + u_i + e_i`` with ``e_i ~ N(0, v_i)``, ``u_i ~ N(0, tau2)``.

    Under ``knapp_hartung`` the coefficient covariance is multiplied by the
    weighted residual mean square and tests use t with ``k - p`` df.
    """
    if spec.scale_terms:
        raise SchemaError("use fit_location_scale for models with scale terms")
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    X, info = _as_X(X, len(y))
    k, p = X.shape
    if k <= p:
        raise InsufficientDataError(f"need more studies than coefficients (k={k}, p={p})")
    if np.any(~np.isfinite(y)) or np.any(~(v > 0)):
        raise SchemaError("y must be finite and v positive (filter complete cases first)")
    flags = []
    if spec.fixed_tau2 is not None:
        tau2, n_var = float(spec.fixed_tau2), 0
    else:
        est = estimate_tau2(spec.method, y, v, X)
        tau2, n_var = est.tau2, (0 if spec.method == "FE" else 1)
        flags += est.flags
    method = "FE" if (spec.method == "FE" and spec.fixed_tau2 is None) else spec.method
    f = wls_fit(y, X, v + tau2, need_hat=False)
    cov_b = f.cov_b
    ddf, s2 = None, 1.0
    if spec.test == "knapp_hartung":
        s2 = f.rss_weighted / (k - p)
        if spec.truncate_kh:
            s2 = max(1.0, s2)
        cov_b = cov_b * s2
        ddf = k - p
    QE = q_generalized(0.0, y, v, X)
    QE_df = k - p
    wt = wald_test(f.b, cov_b, moderator_index(X, info), ddf)
    I2, H2 = heterogeneity_stats(tau2, v, X, QE, method)
    if method in ("ML", "FE"):
        ll = ml_loglik(y, X, v + tau2)
        crit_method = "ML"
    else:
        ll = reml_loglik(y, X, v + tau2)
        crit_method = "REML"
    fit_stats = information_criteria(ll, p + n_var, k, p, crit_method)
    fit_stats["loglik"] = ll
    return UniFit(
        spec=spec, y=y, v=v, X=X, b=f.b, cov_b=cov_b, tau2=tau2,
        se_tau2=se_tau2(method, tau2, y, v, X) if spec.fixed_tau2 is None else math.nan,
        k=k, p=p, QE=QE, QE_df=QE_df, QEp=float(stats.chi2.sf(QE, QE_df)),
        QM=wt.stat, QM_df=(wt.df1, wt.df2) if ddf else (wt.df1,), QMp=wt.p,
        I2=I2, H2=H2, loglik=ll, fit_stats=fit_stats, kh_scale=s2, ddf=ddf,
        design=info, row_ids=None if row_ids is None else np.asarray(row_ids),
        data=data, flags=flags,
    )


def refit(fit: UniFit, keep):
    """Refit the same specification on a row subset (boolean mask or indices)."""
    keep = np.asarray(keep)
    X = fit.X[keep]
    return fit_uni(fit.spec, fit.y[keep], fit.v[keep], _with_info(X, fit.design),
                   row_ids=None if fit.row_ids is None else fit.row_ids[keep])


def _with_info(X, info):
    if info is None:
        return X
    return DesignMatrix(X, info)


def pooled_estimate(fit: UniFit, x=None, level=None):
    """Estimate, SE, and CI at design row ``x`` (the intercept by default)."""
    x = _default_x(fit, x)
    est = float(x @ fit.b)
    se = math.sqrt(float(x @ fit.cov_b @ x))
    q = fit.crit(level)
    return est, se, Interval(est - q * se, est + q * se)


def _default_x(fit, x):
    if x is None:
        x = np.zeros(fit.p)
        x[0] = 1.0
    return np.asarray(x, dtype=float)


def prediction_interval(fit: UniFit, level=None, x=None, tau2=None) -> Interval:
    """Interval for a new true effect: ``pred +/- q * sqrt(SE^2 + tau2)``."""
    x = _default_x(fit, x)
    est, se, _ = pooled_estimate(fit, x, level)
    t2 = fit.tau2 if tau2 is None else tau2
    h = fit.crit(level) * math.sqrt(se**2 + t2)
    return Interval(est - h, est + h)


def ci_tau2(fit: UniFit, level=None) -> Interval:
    level = fit.spec.ci_level if level is None else level
    return ci_tau2_qprofile(fit.y, fit.v, fit.X, level)


def transform_estimates(point, ci, transform):
    """Map a point estimate and its interval through exp or tanh."""
    fn = {"none": lambda x: x, "exp": math.exp, "tanh": math.tanh}.get(transform)
    if fn is None:
        raise SchemaError(f"unknown transform {transform!r}")
    lo, hi = (ci.lower, ci.upper) if isinstance(ci, Interval) else ci
    return fn(point), Interval(fn(lo), fn(hi), ("transformed",) if transform != "none" else ())


def with_spec(fit: UniFit, **changes):
    return replace(fit.spec, **changes)
