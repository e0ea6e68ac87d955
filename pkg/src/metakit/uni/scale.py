"""Location-scale models: log-linear regression for the heterogeneity variance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from ..errors import ConvergenceError, InsufficientDataError, SchemaError
from ..kernel import check_full_rank, information_criteria, ml_loglik, reml_loglik, wls_fit
from .estimators import estimate_tau2
from .model import UniFit, UniModelSpec, _as_X, heterogeneity_stats, moderator_index, q_generalized, wald_test

GRAD_TOL = 1e-6
N_RESTARTS = 5
# lower clamp on the linear predictor; exp(-30) is numerically zero next to any vi
ETA_MIN = -30.0


@dataclass
class ScaleFit:
    alpha: np.ndarray
    cov_alpha: np.ndarray
    tau2_i: np.ndarray
    Z: np.ndarray
    design: object = None
    converged: bool = True
    trace: list = field(default_factory=list)

    @property
    def q(self):
        return len(self.alpha)

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov_alpha))

    @property
    def column_names(self):
        if self.design is not None:
            return list(self.design.column_names)
        return [f"z{j}" for j in range(self.q)]

    def coef_table(self, level=0.95):
        se = self.se
        z = self.alpha / se
        q = stats.norm.ppf(0.5 + level / 2)
        return {"name": self.column_names, "estimate": self.alpha, "se": se, "stat": z,
                "p": 2 * stats.norm.sf(np.abs(z)), "ci_lower": self.alpha - q * se,
                "ci_upper": self.alpha + q * se, "df": None}

    def term_tests(self):
        if self.design is None:
            return {}
        return {label: wald_test(self.alpha, self.cov_alpha, sl)
                for label, sl in self.design.term_slices.items()}

    def tau2_at(self, z):
        """Fitted heterogeneity at scale-design row(s) ``z``."""
        return np.exp(np.clip(np.asarray(z, dtype=float) @ self.alpha, ETA_MIN, None))


def _num_grad(f, x):
    g = np.empty_like(x)
    for j in range(len(x)):
        h = 1e-5 * (1 + abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _num_hess(f, x):
    n = len(x)
    H = np.empty((n, n))
    for j in range(n):
        h = 1e-4 * (1 + abs(x[j]))
        e = np.zeros(n)
        e[j] = h
        H[:, j] = (_num_grad(f, x + e) - _num_grad(f, x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def fit_location_scale(spec: UniModelSpec, y, v, X=None, Z=None, data=None, row_ids=None):
    """Fit ``y_i = x_i'b + u_i + e_i`` with ``var(u_i) = exp(z_i'alpha)``.

    ``alpha`` maximizes the restricted (or full) likelihood with ``b``
    profiled out by GLS. The outer problem is solved by BFGS with
    central-difference gradients, restarted from perturbed starts; the best
    converged solution is kept. Scale coefficients get Wald z tests from the
    observed information. Returns ``(UniFit, ScaleFit)``.
    """
    if spec.method not in ("REML", "ML"):
        raise SchemaError("location-scale models need method REML or ML")
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    k = len(y)
    X, info = _as_X(X, k)
    Z, zinfo = _as_X(Z, k)
    p, q = X.shape[1], Z.shape[1]
    if k <= p + q:
        raise InsufficientDataError(f"need k > p + q (k={k}, p={p}, q={q})")
    check_full_rank(Z, zinfo)
    ll_fn = reml_loglik if spec.method == "REML" else ml_loglik

    def negll(alpha):
        eta = np.clip(Z @ alpha, ETA_MIN, 50.0)
        try:
            return -ll_fn(y, X, v + np.exp(eta))
        except Exception:
            return math.inf

    # start from the homogeneous fit: intercept-like direction gets log(tau2)
    t0 = estimate_tau2(spec.method, y, v, X).tau2
    a0, *_ = np.linalg.lstsq(Z, np.full(k, math.log(max(t0, 1e-2 * float(np.mean(v))))), rcond=None)
    starts = [a0] + [a0 + d for d in _perturbations(q)]
    best, trace = None, []
    for s in starts:
        res = optimize.minimize(negll, s, jac=lambda a: _num_grad(negll, a), method="BFGS",
                                options={"gtol": GRAD_TOL, "maxiter": 1000})
        g = np.max(np.abs(_num_grad(negll, res.x)))
        trace.append({"start": s.tolist(), "alpha": res.x.tolist(), "negll": float(res.fun), "grad": float(g)})
        ok = np.isfinite(res.fun) and g < 1e-4 * max(1.0, abs(res.fun))
        if ok and (best is None or res.fun < best.fun - 1e-12):
            best = res
    if best is None:
        raise ConvergenceError("location-scale optimizer did not converge from any start", trace)
    alpha = best.x
    H = _num_hess(negll, alpha)
    try:
        cov_alpha = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov_alpha = np.full((q, q), np.nan)
    tau2_i = np.exp(np.clip(Z @ alpha, ETA_MIN, None))
    sf = ScaleFit(alpha, cov_alpha, tau2_i, Z, zinfo, True, trace)

    f = wls_fit(y, X, v + tau2_i, need_hat=False)
    ddf = k - p if spec.test == "knapp_hartung" else None
    QE = q_generalized(0.0, y, v, X)
    wt = wald_test(f.b, f.cov_b, moderator_index(X, info), ddf)
    ll = -float(best.fun)
    fit_stats = information_criteria(ll, p + q, k, p, spec.method)
    fit_stats["loglik"] = ll
    tau2 = float(np.mean(tau2_i))
    I2, H2 = heterogeneity_stats(tau2, v, X, QE, spec.method)
    uf = UniFit(
        spec=spec, y=y, v=v, X=X, b=f.b, cov_b=f.cov_b, tau2=tau2, se_tau2=math.nan, k=k, p=p,
        QE=QE, QE_df=k - p, QEp=float(stats.chi2.sf(QE, k - p)),
        QM=wt.stat, QM_df=(wt.df1, wt.df2) if ddf else (wt.df1,), QMp=wt.p,
        I2=I2, H2=H2, loglik=ll, fit_stats=fit_stats, kh_scale=1.0, ddf=ddf, design=info,
        row_ids=None if row_ids is None else np.asarray(row_ids), data=data, tau2_i=tau2_i, scale=sf,
        flags=["location-scale: t tests use k-p df without residual rescaling"] if ddf else [],
    )
    return uf, sf


def _perturbations(q):
    # deterministic spread of restarts
    out = []
    for r in range(N_RESTARTS - 1):
        d = np.zeros(q)
        d[r % q] = (-1.0) ** r * (0.5 + 0.5 * (r // 2))
        out.append(d)
    return out
