"""Multilevel / multivariate models with nested random intercepts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from ..errors import ConvergenceError, FactorizationError, InsufficientDataError, SchemaError
from ..kernel import DesignMatrix, information_criteria, ml_loglik, reml_loglik, wls_fit
from ..tables import ResultTable
from ..uni.estimators import Interval
from ..uni.model import moderator_index, wald_test
from .vcov import VMatrix, indicator_cross

LOG_MIN = -30.0
ZERO_TOL = 1e-10
N_RESTARTS = 5
MV_TESTS = ("knapp_hartung", "t", "wald_z")


@dataclass
class MVFit:
    y: np.ndarray
    X: np.ndarray
    V: np.ndarray
    b: np.ndarray
    cov_b: np.ndarray
    sigma2: dict
    loglik: float
    k: int
    p: int
    method: str
    test: str
    ddf: float | None
    QE: float
    QE_df: int
    QEp: float
    QM: float
    QM_df: tuple
    QMp: float
    fit_stats: dict
    components: dict          # name -> group labels
    fixed: dict               # name -> pinned value
    kh_scale: float = 1.0
    design: object = None
    row_ids: np.ndarray | None = None
    ci_level: float = 0.95
    data: object = None
    flags: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    @property
    def loglik_restricted(self):
        return self.loglik if self.method == "REML" else math.nan

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov_b))

    @property
    def v(self):
        """Sampling variances (diagonal of V)."""
        return np.diag(self.V).copy()

    @property
    def column_names(self):
        if self.design is not None:
            return list(self.design.column_names)
        return [f"x{j}" for j in range(self.p)]

    def crit(self, level=None):
        level = self.ci_level if level is None else level
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

    def marginal_cov(self):
        return _marginal(self.V, self.components, self.sigma2)

    @property
    def tau2(self):
        """Total random-effects variance (sum of the components)."""
        return float(sum(self.sigma2.values()))

    def row_tau2(self):
        return np.full(self.k, self.tau2)

    def term_tests(self):
        if self.design is None:
            return {}
        return {label: wald_test(self.b, self.cov_b, sl, self.ddf)
                for label, sl in self.design.term_slices.items()}


def _marginal(V, components, sigma2):
    M = np.array(V, dtype=float, copy=True)
    for name, labels in components.items():
        s = sigma2.get(name, 0.0)
        if s:
            M += s * indicator_cross(labels)
    return M


def _upper(y, V):
    return max(10.0 * float(np.var(y, ddof=1)), 10.0 * float(np.mean(np.diag(V))), 1e-4)


def fit_mv(y, X, V, components, test="t", method="REML", fixed=None, ci_level=0.95, row_ids=None, data=None):
    """Fit ``y = Xb + sum_c Z_c u_c + e`` with ``e ~ N(0, V)``, ``u_c ~ N(0, sigma2_c I)``.

    ``components`` maps a component name to per-row group labels (see
    :func:`metakit.mv.vcov.nested_components`). ``fixed`` pins components
    to given values. Free components are optimized on the log scale with
    L-BFGS-B and central-difference gradients; values below ``1e-10`` are
    reported as 0 after a boundary check. ``test``: ``t`` (t/F with
    ``k - p`` df), ``knapp_hartung`` (additionally scales ``cov_b`` by the
    weighted residual mean square) or ``wald_z``.
    """
    if test not in MV_TESTS:
        raise SchemaError(f"unknown test {test!r}; expected one of {MV_TESTS}")
    if method not in ("REML", "ML"):
        raise SchemaError("multilevel models are fitted by REML or ML")
    y = np.asarray(y, dtype=float)
    info = X.info if isinstance(X, DesignMatrix) else None
    X = np.ones((len(y), 1)) if X is None else np.asarray(getattr(X, "X", X), dtype=float)
    Vm = V.V if isinstance(V, VMatrix) else np.asarray(V, dtype=float)
    k, p = X.shape
    if k <= p:
        raise InsufficientDataError(f"need more estimates than coefficients (k={k}, p={p})")
    if Vm.shape != (k, k):
        raise SchemaError(f"V is {Vm.shape}, expected {(k, k)}")
    components = {n: np.asarray(l, dtype=object) for n, l in components.items()}
    for n, l in components.items():
        if len(l) != k:
            raise SchemaError(f"component {n!r} has {len(l)} labels, expected {k}")
    fixed = dict(fixed or {})
    unknown = set(fixed) - set(components)
    if unknown:
        raise SchemaError(f"fixed components not in the model: {sorted(unknown)}")
    free = [n for n in components if n not in fixed]
    ZZ = {n: indicator_cross(l) for n, l in components.items()}
    ll_fn = reml_loglik if method == "REML" else ml_loglik

    def M_of(s2):
        M = Vm.copy()
        for n, s in s2.items():
            if s:
                M += s * ZZ[n]
        return M

    def loglik(s2):
        try:
            return ll_fn(y, X, M_of(s2))
        except FactorizationError:
            return -math.inf

    def s2_from(theta):
        s2 = dict(fixed)
        for n, t in zip(free, theta):
            s2[n] = math.exp(t) if t > LOG_MIN else 0.0
        return s2

    trace = []
    if free:
        upper = _upper(y, Vm)
        hi = math.log(upper * 100.0)
        f = lambda th: -loglik(s2_from(th))

        def grad(th):
            g = np.empty(len(th))
            for j in range(len(th)):
                h = 1e-5 * (1 + abs(th[j]))
                e = np.zeros(len(th))
                e[j] = h
                g[j] = (f(np.minimum(th + e, hi)) - f(np.maximum(th - e, LOG_MIN))) / (
                    min(th[j] + h, hi) - max(th[j] - h, LOG_MIN))
            return g

        base = math.log(max(0.25 * upper / 10.0, 1e-6))
        starts = [np.full(len(free), base)]
        for r in range(N_RESTARTS - 1):
            starts.append(starts[0] + (-1.0) ** r * (1.0 + r // 2) * np.ones(len(free))
                          + 0.5 * np.arange(len(free)) * (-1.0) ** r)
        best = None
        for s in starts:
            res = optimize.minimize(f, s, jac=grad, method="L-BFGS-B", bounds=[(LOG_MIN, hi)] * len(free),
                                    options={"ftol": 1e-15, "gtol": 1e-9, "maxiter": 2000})
            trace.append({"start": s.tolist(), "theta": res.x.tolist(), "negll": float(res.fun),
                          "success": bool(res.success)})
            if np.isfinite(res.fun) and (best is None or res.fun < best.fun - 1e-12):
                best = res
            if best is not None and best.success and len(trace) >= 2:
                # two converged starts agreeing is enough
                if abs(trace[-1]["negll"] - trace[-2]["negll"]) < 1e-9:
                    break
        if best is None or not np.isfinite(best.fun):
            raise ConvergenceError("multilevel optimizer failed from every start", trace)
        s2 = _polish(loglik, s2_from(best.x), free)
    else:
        s2 = dict(fixed)
    flags = []
    for n in free:
        if s2[n] < ZERO_TOL:
            s2[n] = 0.0
            flags.append(f"{n}: variance component estimated at the boundary (0)")
    ll = loglik(s2)
    if not np.isfinite(ll):
        raise ConvergenceError("marginal covariance not positive definite at the solution", trace)
    M = M_of(s2)
    w = wls_fit(y, X, M, need_hat=False)
    cov_b, ddf, s2kh = w.cov_b, None, 1.0
    if test in ("t", "knapp_hartung"):
        ddf = k - p
    if test == "knapp_hartung":
        s2kh = w.rss_weighted / (k - p)
        cov_b = cov_b * s2kh
    try:
        QE = wls_fit(y, X, Vm, need_hat=False).rss_weighted
        QEp = float(stats.chi2.sf(QE, k - p))
    except FactorizationError:
        QE, QEp = math.nan, math.nan
        flags.append("V singular: residual heterogeneity test unavailable")
    wt = wald_test(w.b, cov_b, moderator_index(X, info), ddf)
    n_par = p + len(free)
    fit_stats = information_criteria(ll, n_par, k, p, method)
    fit_stats["loglik"] = ll
    return MVFit(
        y=y, X=X, V=Vm, b=w.b, cov_b=cov_b, sigma2={n: float(s2[n]) for n in components}, loglik=ll,
        k=k, p=p, method=method, test=test, ddf=ddf, QE=QE, QE_df=k - p, QEp=QEp,
        QM=wt.stat, QM_df=(wt.df1, wt.df2) if ddf else (wt.df1,), QMp=wt.p, fit_stats=fit_stats,
        components=components, fixed=fixed, kh_scale=s2kh, design=info,
        row_ids=None if row_ids is None else np.asarray(row_ids), ci_level=ci_level, data=data, flags=flags,
        trace=trace,
    )


def _polish(loglik, s2, free):
    """Newton steps on the raw variances of interior components, plus a check
    of every boundary combination so that a component is only left positive
    when that beats pinning it to zero."""
    s2 = dict(s2)
    inner = [n for n in free if s2[n] > ZERO_TOL]
    for _ in range(30):
        if not inner:
            break
        x = np.array([s2[n] for n in inner])
        h = np.maximum(1e-6 * x, 1e-9)

        def val(xx):
            t = dict(s2)
            t.update(zip(inner, xx))
            return loglik(t)

        f0 = val(x)
        n = len(x)
        g, H = np.empty(n), np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = h[i]
            fp, fm = val(x + e), val(x - e)
            g[i] = (fp - fm) / (2 * h[i])
            H[i, i] = (fp - 2 * f0 + fm) / h[i] ** 2
            for j in range(i):
                e2 = np.zeros(n)
                e2[j] = h[j]
                H[i, j] = H[j, i] = (val(x + e + e2) - val(x + e - e2) - val(x - e + e2) + val(x - e - e2)) / (
                    4 * h[i] * h[j])
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.linalg.eigvalsh(H) < 0):
            break
        x_new = np.maximum(x + step, 0.0)
        if val(x_new) < f0 - 1e-12:
            break
        s2.update(zip(inner, x_new))
        if np.max(np.abs(step) / np.maximum(x, 1e-12)) < 1e-12:
            break
    best_ll = loglik(s2)
    for n in free:
        if s2[n] > 0:
            t = dict(s2)
            t[n] = 0.0
            if loglik(t) >= best_ll:
                s2, best_ll = t, loglik(t)
    return s2


def _refit(fit: MVFit, fixed):
    return fit_mv(fit.y, DesignMatrix(fit.X, fit.design) if fit.design is not None else fit.X, fit.V,
                  fit.components, fit.test, fit.method, fixed, fit.ci_level, fit.row_ids, fit.data)


def inclusion_tests(full: MVFit) -> ResultTable:
    """Likelihood-ratio tests for dropping each variance component, and all jointly."""
    tab = ResultTable("component_inclusion_tests",
                      ["component", "df", "loglik_reduced", "LRT", "p", "available"],
                      title="Component Inclusion Tests")
    free = [n for n in full.components if n not in full.fixed]
    drops = [[n] for n in free]
    if len(free) > 1:
        drops.append(list(free))
    for drop in drops:
        fixed = dict(full.fixed)
        fixed.update({n: 0.0 for n in drop})
        label = " + ".join(drop)
        try:
            red = _refit(full, fixed)
        except (ConvergenceError, FactorizationError) as e:
            tab.add_row(component=label, df=len(drop), loglik_reduced=None, LRT=None, p=None, available=False)
            tab.footnotes.append(f"{label}: reduced fit failed ({e})")
            continue
        lrt = 2.0 * (full.loglik - red.loglik)
        if lrt < 0:
            lrt = 0.0
        tab.add_row(component=label, df=len(drop), loglik_reduced=red.loglik, LRT=lrt,
                    p=float(stats.chi2.sf(lrt, len(drop))), available=True)
    tab.footnotes.append("p-values use the naive chi-square reference (no boundary correction); "
                         "they are conservative.")
    return tab


def ci_sigma_profile(fit: MVFit, component, level=0.95, max_doublings=60) -> Interval:
    """Profile-likelihood interval for one variance component.

    Other free components are re-optimized at every evaluation. Endpoints
    solve ``2 (l_max - l(s)) = chi2_1(level)``.
    """
    if component not in fit.components or component in fit.fixed:
        raise SchemaError(f"{component!r} is not a free component of the fit")
    target = fit.loglik - 0.5 * stats.chi2.ppf(level, 1)

    def prof(s):
        fixed = dict(fit.fixed)
        fixed[component] = float(s)
        try:
            return _refit(fit, fixed).loglik - target
        except (ConvergenceError, FactorizationError):
            return -math.inf

    s_hat = fit.sigma2[component]
    flags = []
    if prof(0.0) >= 0:
        lower = 0.0
        flags.append("lower bound truncated at 0")
    else:
        lower = optimize.brentq(prof, 0.0, s_hat, xtol=1e-12, rtol=1e-10) if s_hat > 0 else 0.0
    hi = max(2.0 * s_hat, 1e-3 * _upper(fit.y, fit.V))
    for _ in range(max_doublings):
        if prof(hi) < 0:
            break
        hi *= 2.0
    else:
        return Interval(lower, math.inf, tuple(flags + ["upper bound open (flat profile)"]))
    upper = optimize.brentq(prof, s_hat, hi, xtol=1e-12, rtol=1e-10)
    return Interval(lower, upper, tuple(flags))
