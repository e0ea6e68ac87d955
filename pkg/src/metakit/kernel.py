"""Design matrices, generalized least squares, likelihoods and Q statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import FactorizationError, InsufficientDataError, SchemaError, SingularDesignError
from .ingest import CATEGORICAL, REAL, Dataset

LOG2PI = math.log(2 * math.pi)


def parse_term(term):
    """``"a:b"`` -> ``("a", "b")``; whitespace is ignored."""
    if isinstance(term, (tuple, list)):
        return tuple(term)
    return tuple(p.strip() for p in str(term).split(":") if p.strip())


def term_label(parts):
    return ":".join(parts)


@dataclass(frozen=True)
class DesignInfo:
    """Everything needed to encode new rows the same way as the fitted data."""

    terms: tuple
    intercept: bool
    kinds: dict            # variable -> "real" | "categorical"
    levels: dict           # categorical variable -> levels used (first is reference)
    column_names: tuple
    term_slices: dict      # term label -> slice into columns

    @property
    def variables(self):
        return tuple(self.kinds)

    def term_columns(self, term):
        return self.term_slices[term_label(parse_term(term))]

    def encode(self, values: dict) -> np.ndarray:
        """Encode rows given as ``variable -> sequence`` (strings for factors)."""
        n = None
        for v in self.kinds:
            if v not in values:
                raise SchemaError(f"value for {v!r} required")
            n = len(values[v]) if n is None else n
        n = n if n is not None else 0
        blocks = [np.ones((n, 1))] if self.intercept else []
        for t in self.terms:
            blocks.append(self._term_block(t, values, n))
        if not blocks:
            return np.zeros((n, 0))
        return np.hstack(blocks)

    def _var_block(self, var, values, n):
        if self.kinds[var] == REAL:
            return np.asarray(values[var], dtype=float).reshape(n, 1)
        lv = self.levels[var]
        col = list(values[var])
        out = np.zeros((n, len(lv) - 1))
        for i, x in enumerate(col):
            if x not in lv:
                raise SchemaError(f"level {x!r} of {var!r} not in the model (levels {lv})")
            j = lv.index(x)
            if j > 0:
                out[i, j - 1] = 1.0
        return out

    def _term_block(self, term, values, n):
        block = np.ones((n, 1))
        for var in term:
            vb = self._var_block(var, values, n)
            block = np.einsum("ij,ik->ijk", block, vb).reshape(n, -1)
        return block


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    info: DesignInfo
    row_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    @property
    def term_map(self):
        return self.info.term_slices

    @property
    def coding(self):
        return {v: lv[0] for v, lv in self.info.levels.items()}

    @property
    def shape(self):
        return self.X.shape


def _column_names(term, kinds, levels):
    names = [""]
    for var in term:
        if kinds[var] == REAL:
            parts = [var]
        else:
            parts = [f"{var}[{lv}]" for lv in levels[var][1:]]
        names = [f"{a}:{b}" if a else b for a in names for b in parts]
    return names


def build_design(d: Dataset, terms=(), intercept=True, check_rank=True) -> DesignMatrix:
    """Expand model terms into a design matrix.

    Factors get treatment coding against their first level (level order is
    fixed at load); interactions are products of the parents' columns.
    Only levels that occur in ``d`` are used.
    """
    terms = tuple(parse_term(t) for t in terms)
    kinds, levels = {}, {}
    for t in terms:
        for var in t:
            if var not in d:
                raise SchemaError(f"unknown column {var!r}")
            tp = d.types[var]
            if tp == REAL:
                kinds[var] = REAL
            elif tp == CATEGORICAL:
                kinds[var] = CATEGORICAL
                levels[var] = d.observed_levels(var)
            else:
                raise SchemaError(f"column {var!r} is text and cannot be a moderator")
            if d.missing(var).any():
                raise SchemaError(f"column {var!r} has missing values; filter complete cases first")
    names, slices = (["intrcpt"] if intercept else []), {}
    for t in terms:
        cols = _column_names(t, kinds, levels)
        slices[term_label(t)] = slice(len(names), len(names) + len(cols))
        names.extend(cols)
    info = DesignInfo(terms, intercept, kinds, levels, tuple(names), slices)
    X = info.encode({v: d[v] for v in kinds}) if kinds else np.ones((len(d), int(intercept)))
    if not kinds and not intercept:
        X = np.zeros((len(d), 0))
    if check_rank:
        check_full_rank(X, info)
    return DesignMatrix(X, info, np.asarray(d.row_ids))


def check_full_rank(X, info=None):
    k, p = X.shape
    if p == 0:
        return
    if k < p:
        raise SingularDesignError(f"design has {p} columns but only {k} rows")
    s = np.linalg.svd(X, compute_uv=False)
    tol = s.max() * max(k, p) * np.finfo(float).eps
    if s.min() > tol:
        return
    # name the columns that lie in the span of the preceding ones
    names = info.column_names if info is not None else tuple(f"x{j}" for j in range(p))
    bad = []
    for j in range(1, p):
        q = np.linalg.matrix_rank(X[:, : j + 1], tol=tol)
        if q <= np.linalg.matrix_rank(X[:, :j], tol=tol):
            bad.append(names[j])
    raise SingularDesignError(f"design matrix is rank deficient; collinear columns: {bad}", bad)


def cholesky(M, what="marginal covariance"):
    """Lower Cholesky factor; raises :class:`FactorizationError` with the pivot."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        if np.any(~(M > 0)):
            bad = int(np.flatnonzero(~(M > 0))[0])
            raise FactorizationError(f"{what} not positive definite (pivot {bad})", bad)
        return np.sqrt(M)
    L, info = linalg.lapack.dpotrf(M, lower=1, clean=1)
    if info != 0:
        pivot = info - 1 if info > 0 else None
        raise FactorizationError(f"{what} not positive definite (pivot {pivot})", pivot)
    return L


def _whiten(L, A):
    if L.ndim == 1:
        return A / (L[:, None] if A.ndim == 2 else L)
    return linalg.solve_triangular(L, A, lower=True)


def logdet_chol(L):
    if L.ndim == 1:
        return 2.0 * np.log(L).sum()
    return 2.0 * np.log(np.diag(L)).sum()


@dataclass
class WLSFit:
    b: np.ndarray
    cov_b: np.ndarray
    residuals: np.ndarray
    hat: np.ndarray
    rss_weighted: float
    logdet_M: float = math.nan
    logdet_XtWX: float = math.nan


def wls_fit(y, X, M, need_hat=True) -> WLSFit:
    """GLS: ``b = (X'M^-1X)^-1 X'M^-1 y`` through the Cholesky factor of ``M``.

    ``M`` may be a full matrix or a vector holding a diagonal.
    """
    y = np.asarray(y, dtype=float)
    X = X.X if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    k, p = X.shape
    if len(y) != k:
        raise SchemaError(f"y has length {len(y)}, X has {k} rows")
    L = cholesky(M)
    Xw = _whiten(L, X)
    yw = _whiten(L, y)
    if p:
        Q, R = np.linalg.qr(Xw)
        if np.any(np.abs(np.diag(R)) <= 1e-13 * max(1.0, np.abs(R).max())):
            raise SingularDesignError("X'M^-1X is singular")
        b = linalg.solve_triangular(R, Q.T @ yw)
        Rinv = linalg.solve_triangular(R, np.eye(p))
        cov_b = Rinv @ Rinv.T
        logdet_xtwx = 2.0 * np.log(np.abs(np.diag(R))).sum()
    else:
        b, cov_b, logdet_xtwx = np.zeros(0), np.zeros((0, 0)), 0.0
    resid = y - X @ b
    rw = _whiten(L, resid)
    hat = None
    if need_hat:
        # H = X cov_b X' M^-1
        if L.ndim == 1:
            MinvX = X / (L**2)[:, None]
        else:
            MinvX = linalg.cho_solve((L, True), X)
        hat = X @ cov_b @ MinvX.T
    return WLSFit(b, cov_b, resid, hat, float(rw @ rw), logdet_chol(L), logdet_xtwx)


def q_statistic(y, X, w) -> float:
    """Weighted residual sum of squares ``sum w_i (y_i - x_i'b_w)^2``."""
    w = np.asarray(w, dtype=float)
    return wls_fit(y, X, 1.0 / w, need_hat=False).rss_weighted


def ml_loglik(y, X, M) -> float:
    y = np.asarray(y, dtype=float)
    f = wls_fit(y, X, M, need_hat=False)
    return -0.5 * (len(y) * LOG2PI + f.logdet_M + f.rss_weighted)


def reml_loglik(y, X, M, fit=None) -> float:
    """Restricted log-likelihood.

    Includes the ``+1/2 ln|X'X|`` term so that the value does not depend on
    how the fixed-effects design is parameterized.
    """
    y = np.asarray(y, dtype=float)
    X = X.X if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    k, p = X.shape
    if k - p <= 0:
        raise InsufficientDataError(f"restricted likelihood needs k > p (k={k}, p={p})")
    f = fit or wls_fit(y, X, M, need_hat=False)
    logdet_xx = np.linalg.slogdet(X.T @ X)[1] if p else 0.0
    return -0.5 * ((k - p) * LOG2PI + f.logdet_M + f.logdet_XtWX - logdet_xx + f.rss_weighted)


def information_criteria(loglik, n_params, k, p, method):
    """(deviance, AIC, BIC, AICc); BIC uses k for ML and k - p for REML."""
    n = k - p if method == "REML" else k
    aic = -2 * loglik + 2 * n_params
    bic = -2 * loglik + n_params * math.log(n)
    aicc = aic + 2 * n_params * (n_params + 1) / (n - n_params - 1) if n - n_params - 1 > 0 else math.nan
    return {"deviance": -2 * loglik, "AIC": aic, "BIC": bic, "AICc": aicc}


def psd_inverse_sqrt(A, rel_tol=1e-12, allow_pinv=False):
    """Symmetric inverse square root by eigendecomposition.

    Eigenvalues below ``rel_tol * max`` raise ``LinAlgError`` unless
    ``allow_pinv``, in which case they are dropped (Moore-Penrose root).
    """
    A = 0.5 * (A + A.T)
    w, U = np.linalg.eigh(A)
    cut = rel_tol * max(w.max(), 0.0)
    small = w <= cut
    if small.any() and not allow_pinv:
        raise np.linalg.LinAlgError("matrix is singular to working precision")
    inv = np.zeros_like(w)
    inv[~small] = 1.0 / np.sqrt(w[~small])
    return (U * inv) @ U.T
