"""Cluster-robust (sandwich) covariance with small-sample corrections."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .errors import CR2AdjustmentError, InsufficientDataError, SchemaError
from .kernel import psd_inverse_sqrt
from .tables import ResultTable

CR_TYPES = ("CR0", "CR1", "CR2")


@dataclass
class RobustFit:
    cov_robust: np.ndarray
    df: np.ndarray
    type: str
    n_clusters: int
    b: np.ndarray
    names: list
    # pieces kept for Satterthwaite df of arbitrary contrasts
    _P_parts: tuple = ()
    _Phi: np.ndarray | None = None
    _bread: np.ndarray | None = None

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov_robust))

    def satterthwaite_df(self, c):
        """Satterthwaite df for the variance estimate of ``c'b``."""
        return _satterthwaite(np.asarray(c, dtype=float), self._P_parts, self._Phi, self._bread)


def _fit_arrays(fit):
    X = np.asarray(fit.X, dtype=float)
    y = np.asarray(fit.y, dtype=float)
    M = fit.marginal_cov()
    return X, y, np.asarray(fit.b, dtype=float), M


def cluster_robust(fit, clusters, type="CR2", allow_pinv=False) -> RobustFit:
    """Sandwich covariance of ``fit.b`` with clusters given per row.

    The working model is the fit's own marginal covariance ``M`` with weights
    ``W = M^-1``. CR2 adjusts each cluster's residuals by the symmetric
    inverse square root of its block of ``(I - H) M (I - H)'`` expressed in
    the ``M`` metric; CR1 multiplies CR0 by ``G/(G-1)``. Degrees of freedom
    per coefficient follow Satterthwaite's approximation under the working
    model.
    """
    if type not in CR_TYPES:
        raise SchemaError(f"unknown robust type {type!r}; expected one of {CR_TYPES}")
    X, y, b, M = _fit_arrays(fit)
    k, p = X.shape
    clusters = np.asarray(clusters, dtype=object)
    if len(clusters) != k:
        raise SchemaError(f"clustering has {len(clusters)} entries, model has {k} rows")
    if any(c is None for c in clusters):
        raise SchemaError("every row must be assigned to a cluster")
    levels = sorted(set(clusters), key=lambda s: str(s).encode("utf-8"))
    G = len(levels)
    if G < 2:
        raise InsufficientDataError(f"cluster-robust inference needs at least 2 clusters, got {G}")
    W = linalg.cho_solve(linalg.cho_factor(M, lower=True), np.eye(k))
    W = 0.5 * (W + W.T)
    WX = W @ X
    B = np.linalg.inv(X.T @ WX)
    B = 0.5 * (B + B.T)
    e = y - X @ b
    IH = np.eye(k) - X @ B @ WX.T          # I - H, H = X B X'W
    meat = np.zeros((p, p))
    parts = []
    for g in levels:
        idx = np.flatnonzero(clusters == g)
        if type == "CR2":
            Phi_j = M[np.ix_(idx, idx)]
            D = linalg.cholesky(Phi_j, lower=False)     # D'D = Phi_j
            IHj = IH[idx]
            Bj = D @ (IHj @ M @ IHj.T) @ D.T
            try:
                root = psd_inverse_sqrt(Bj, allow_pinv=allow_pinv)
            except np.linalg.LinAlgError:
                raise CR2AdjustmentError(f"CR2 adjustment singular for cluster {g!r}", g) from None
            A = D.T @ root @ D
        else:
            A = np.eye(len(idx))
        u = WX[idx].T @ (A @ e[idx])          # X_j' W_j A_j e_j
        meat += np.outer(u, u)
        # rows of the linear map y -> X_j'W_j A_j e_j, before the bread
        parts.append(WX[idx].T @ A @ IH[idx])
    cov = B @ meat @ B
    if type == "CR1":
        cov = cov * G / (G - 1)
        parts = [math.sqrt(G / (G - 1)) * P for P in parts]
    cov = 0.5 * (cov + cov.T)
    parts = tuple(parts)
    df = np.array([_satterthwaite(np.eye(p)[j], parts, M, B) for j in range(p)])
    names = list(fit.column_names) if hasattr(fit, "column_names") else [f"x{j}" for j in range(p)]
    return RobustFit(cov, df, type, G, b, names, parts, M, B)


def _satterthwaite(c, parts, Phi, B):
    # variance estimate = sum_j (p_j' y)^2 with p_j' = c'B (X_j'W_j A_j (I-H)_j)
    Pm = np.array([c @ B @ P for P in parts])          # G x k, row j is p_j'
    S = Pm @ Phi @ Pm.T
    num = np.trace(S) ** 2
    den = np.sum(S * S)
    return float(num / den) if den > 0 else math.nan


def robust_coef_tests(rf: RobustFit, fit=None, test_values=None, level=0.95) -> ResultTable:
    """t tests and CIs per coefficient using the robust covariance and its df."""
    p = len(rf.b)
    nulls = np.zeros(p) if test_values is None else np.broadcast_to(np.asarray(test_values, float), (p,))
    tab = ResultTable("meta_regression_coefficients",
                      ["term", "estimate", "se", "t", "df", "p", "ci_lower", "ci_upper"],
                      title=f"Coefficients ({rf.type} cluster-robust, {rf.n_clusters} clusters)")
    se = rf.se
    for j in range(p):
        t = (rf.b[j] - nulls[j]) / se[j]
        df = rf.df[j]
        q = stats.t.ppf(0.5 + level / 2, df)
        tab.add_row(term=rf.names[j], estimate=float(rf.b[j]), se=float(se[j]), t=float(t), df=float(df),
                    p=float(2 * stats.t.sf(abs(t), df)), ci_lower=float(rf.b[j] - q * se[j]),
                    ci_upper=float(rf.b[j] + q * se[j]))
    tab.footnotes.append(f"Small-sample adjustment {rf.type} with Satterthwaite degrees of freedom.")
    return tab
