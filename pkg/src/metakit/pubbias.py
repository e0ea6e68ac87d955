"""Funnel asymmetry tests, trim-and-fill, and fail-safe N."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import InsufficientDataError, SchemaError, SingularDesignError
from .uni.model import UniFit, UniModelSpec, fit_uni


@dataclass
class EggerResult:
    slope: float
    se: float
    stat: float
    p: float
    df: float | None
    intercept: float
    fit: UniFit


def egger_regression(y, v, test="knapp_hartung", method="REML") -> EggerResult:
    """Regression test for funnel asymmetry: ``y_i = b0 + b1 sei_i``.

    Weights come from the random-effects model (``method``); use
    ``method="FE"`` for the classical fixed-effect variant. The reported
    test is on the ``sei`` coefficient.
    """
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    if len(y) < 3:
        raise InsufficientDataError("Egger's test needs at least 3 studies")
    sei = np.sqrt(v)
    if np.ptp(sei) <= 1e-12 * max(1.0, sei.max()):
        raise SingularDesignError("all standard errors are equal: sei is collinear with the intercept", ("sei",))
    X = np.column_stack([np.ones(len(y)), sei])
    fit = fit_uni(UniModelSpec(method=method, test=test), y, v, X)
    tab = fit.coef_table()
    return EggerResult(float(fit.b[1]), float(tab["se"][1]), float(tab["stat"][1]), float(tab["p"][1]),
                       fit.ddf, float(fit.b[0]), fit)


@dataclass
class BeggResult:
    tau: float
    p: float
    k: int
    excluded: list = field(default_factory=list)
    method: str = "exact"


def _kendall_exact_sf(n, s_obs):
    """Two-sided exact p for Kendall's S without ties: ``P(|S| >= |s_obs|)``."""
    # number of permutations by inversion count: Mahonian numbers
    maxinv = n * (n - 1) // 2
    c = np.zeros(maxinv + 1)
    c[0] = 1.0
    for m in range(2, n + 1):
        new = np.zeros_like(c)
        for j in range(m):
            new[j:] += c[: maxinv + 1 - j]
        c = new
    c /= c.sum()
    s = maxinv - 2 * np.arange(maxinv + 1)            # S for each inversion count
    return float(min(1.0, c[np.abs(s) >= abs(s_obs) - 1e-9].sum()))


def begg_rank(y, v, exact="auto") -> BeggResult:
    """Rank correlation between standardized deviates and sampling variances.

    Deviates are ``(y_i - mu_FE) / sqrt(v_i - 1/sum(1/v))``. With
    ``exact="auto"`` the p-value is exact for k <= 12 without ties and
    otherwise from the normal approximation to Kendall's S with continuity
    correction. ``exact=True`` uses the exact null distribution whenever
    there are no ties; ``False`` always uses the normal approximation.
    """
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    if len(y) < 3:
        raise InsufficientDataError("the rank correlation test needs at least 3 studies")
    w = 1 / v
    mu = np.sum(w * y) / np.sum(w)
    vstar = v - 1 / np.sum(w)
    ok = vstar > 0
    excluded = [int(i) for i in np.flatnonzero(~ok)]
    z = (y[ok] - mu) / np.sqrt(vstar[ok])
    vv = v[ok]
    k = int(ok.sum())
    if k < 3:
        raise InsufficientDataError("fewer than 3 rows with positive deviate variance")
    tau = float(stats.kendalltau(z, vv, variant="b").statistic)
    ti = np.sign(z[:, None] - z[None, :]) * np.sign(vv[:, None] - vv[None, :])
    S = float(np.triu(ti, 1).sum())
    ties = len(np.unique(z)) < k or len(np.unique(vv)) < k
    use_exact = (k <= 12) if exact == "auto" else bool(exact)
    if use_exact and not ties:
        return BeggResult(tau, _kendall_exact_sf(k, S), k, excluded, "exact")
    var_s = _kendall_var_s(z, vv)
    zstat = (abs(S) - 1) / math.sqrt(var_s) if abs(S) > 0 else 0.0
    return BeggResult(tau, float(min(1.0, 2 * stats.norm.sf(max(zstat, 0.0)))), k, excluded, "normal")


def _kendall_var_s(x, y):
    n = len(x)

    def tie_terms(a):
        _, t = np.unique(a, return_counts=True)
        return (np.sum(t * (t - 1) * (2 * t + 5)), np.sum(t * (t - 1)), np.sum(t * (t - 1) * (t - 2)))

    tx, ux, wx = tie_terms(x)
    ty, uy, wy = tie_terms(y)
    v0 = n * (n - 1) * (2 * n + 5)
    var = (v0 - tx - ty) / 18.0
    var += ux * uy / (2.0 * n * (n - 1))
    if n > 2:
        var += wx * wy / (9.0 * n * (n - 1) * (n - 2))
    return var


@dataclass
class TrimFillResult:
    k0: int
    side: str
    estimator: str
    augmented_y: np.ndarray
    augmented_v: np.ndarray
    filled: np.ndarray           # True for imputed rows
    adjusted_fit: UniFit
    iterations: int
    converged: bool
    se_k0: float = math.nan
    flags: list = field(default_factory=list)

    @property
    def augmented(self):
        from .escalc import EffectSizeRecord
        return [EffectSizeRecord(float(a), float(b), None, True, "filled" if f else "")
                for a, b, f in zip(self.augmented_y, self.augmented_v, self.filled)]


def trim_and_fill(y, v, estimator="L0", side="auto", max_iter=50, spec=None) -> TrimFillResult:
    """Trim-and-fill with the L0 or R0 estimator of the number of missing studies.

    ``side`` is where studies are assumed missing; ``auto`` takes the side
    opposite to the sign of the Egger slope (a positive slope means small
    studies sit right, so studies are missing on the left). Iterations use
    fixed-effect fits; the returned adjusted fit is ``spec`` (random effects
    by default) on the augmented data.
    """
    if estimator not in ("L0", "R0"):
        raise SchemaError(f"unknown estimator {estimator!r}; expected L0 or R0")
    if side not in ("auto", "left", "right"):
        raise SchemaError(f"unknown side {side!r}")
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    k = len(y)
    if k < 3:
        raise InsufficientDataError("trim-and-fill needs at least 3 studies")
    spec = spec or UniModelSpec()
    if side == "auto":
        slope = egger_regression(y, v, test="wald_z", method="FE").slope
        side = "left" if slope > 0 else "right"
    flip = -1.0 if side == "right" else 1.0
    yy = flip * y
    order = np.argsort(yy, kind="stable")
    ys, vs = yy[order], v[order]

    def fe_mean(yv, vv):
        w = 1 / vv
        return float(np.sum(w * yv) / np.sum(w))

    k0, k0_raw, it, converged = 0, 0.0, 0, False
    flags = []
    beta = fe_mean(ys, vs)
    while it < max_iter:
        it += 1
        beta = fe_mean(ys[: k - k0], vs[: k - k0])
        dev = ys - beta
        ranks = stats.rankdata(np.abs(dev), method="ordinal")
        signed = np.sign(dev) * ranks
        if estimator == "L0":
            Sr = float(np.sum(signed[signed > 0]))
            k0_new = (4 * Sr - k * (k + 1)) / (2 * k - 1)
        else:
            neg = signed[signed < 0]
            k0_new = k - (np.max(np.abs(neg)) if len(neg) else 0) - 1
        k0_raw = float(k0_new)
        k0_new = max(0, int(round(k0_new)))
        if k0_new == k0:
            converged = True
            break
        k0 = k0_new
        if k0 >= k:
            flags.append("k0 reached k; stopped")
            k0 = k - 1
            break
    if not converged:
        flags.append("k0 did not stabilize; last iterate returned")
    if estimator == "L0":
        r = k0_raw
        var_sr = (k * (k + 1) * (2 * k + 1) + 10 * r**3 + 27 * r**2 + 17 * r
                  - 18 * k * r**2 - 18 * k * r + 6 * k**2 * r) / 24.0
        se_k0 = 4 * math.sqrt(max(var_sr, 0.0)) / (2 * k - 1)
    else:
        se_k0 = math.sqrt(2 * k0 + 2)
    if k0 > 0:
        ys_fill = 2 * beta - ys[k - k0:]
        aug_y = np.concatenate([y, flip * ys_fill])
        aug_v = np.concatenate([v, vs[k - k0:]])
    else:
        aug_y, aug_v = y.copy(), v.copy()
    filled = np.zeros(len(aug_y), bool)
    filled[k:] = True
    adj = fit_uni(spec, aug_y, aug_v)
    return TrimFillResult(k0, side, estimator, aug_y, aug_v, filled, adj, it, converged, se_k0, flags)


@dataclass
class FailSafeResult:
    method: str
    N: int
    target: float
    alpha: float
    flags: list = field(default_factory=list)


def failsafe_n(y, v, method="Rosenthal", target=None, alpha=0.05) -> FailSafeResult:
    """Number of additional null studies needed to reach non-significance
    (Rosenthal, Rosenberg) or to pull the mean effect down to ``target`` (Orwin).

    Rosenthal uses the one-sided ``alpha`` and reports the smallest whole
    number of studies that crosses. Rosenberg uses the inverse-variance
    weighted z with a two-sided ``alpha``. Orwin uses the unweighted mean
    effect and reports the ceiling.
    """
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    k = len(y)
    if k < 1:
        raise InsufficientDataError("fail-safe N needs at least one study")
    if method == "Rosenthal":
        z = y / np.sqrt(v)
        zs = abs(float(np.sum(z)))
        za = stats.norm.isf(alpha)
        if zs / math.sqrt(k) <= za:
            return FailSafeResult(method, 0, 0.0, alpha, ["combined result not significant"])
        n_real = zs**2 / za**2 - k
        return FailSafeResult(method, int(math.floor(n_real)) + 1, 0.0, alpha)
    if method == "Orwin":
        tgt = float(np.mean(y)) / 2 if target is None else float(target)
        if tgt == 0:
            raise SchemaError("Orwin's fail-safe N needs a nonzero target")
        n_real = k * (float(np.mean(y)) - tgt) / tgt
        return FailSafeResult(method, max(0, int(math.ceil(n_real - 1e-12))), tgt, alpha)
    if method == "Rosenberg":
        w = 1 / v
        zval = float(np.sum(w * y) / math.sqrt(np.sum(w)))
        za = stats.norm.isf(alpha / 2)
        if abs(zval) <= za:
            return FailSafeResult(method, 0, 0.0, alpha, ["combined result not significant"])
        # added null studies carry the average weight: z(N) = sum(w y) / sqrt(sum w + N mean(w))
        n_real = (np.sum(w * y) ** 2 / za**2 - np.sum(w)) / np.mean(w)
        return FailSafeResult(method, max(0, int(math.floor(n_real)) + 1), 0.0, alpha)
    raise SchemaError(f"unknown fail-safe N method {method!r}")
