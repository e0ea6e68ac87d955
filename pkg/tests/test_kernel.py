import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metakit.errors import FactorizationError, SchemaError, SingularDesignError
from metakit.ingest import read_csv_text
from metakit.kernel import build_design, cholesky, ml_loglik, q_statistic, reml_loglik, wls_fit


def test_treatment_coding_and_interaction():
    d = read_csv_text("g,x\nb,1\na,2\nc,3\na,4\nb,5\nc,7\n")
    dm = build_design(d, ["g", "x", "g:x"])
    assert dm.info.column_names == ("intrcpt", "g[b]", "g[c]", "x", "g[b]:x", "g[c]:x")
    np.testing.assert_array_equal(dm.X[0], [1, 1, 0, 1, 1, 0])


def test_rank_deficiency_names_column():
    d = read_csv_text("x,z\n1,2\n2,4\n3,6\n")
    with pytest.raises(SingularDesignError) as e:
        build_design(d, ["x", "z"])
    assert "z" in e.value.terms


def test_missing_moderator_rejected():
    d = read_csv_text("x,y\n1,1\n,2\n3,3\n")
    with pytest.raises(SchemaError):
        build_design(d, ["x"])


def test_cholesky_reports_failure():
    with pytest.raises(FactorizationError):
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_loglik_diag_equals_full():
    rng = np.random.default_rng(3)
    y, v = rng.normal(size=8), rng.uniform(0.1, 1, 8)
    X = np.column_stack([np.ones(8), rng.normal(size=8)])
    assert ml_loglik(y, X, v) == pytest.approx(ml_loglik(y, X, np.diag(v)), rel=1e-12)
    assert reml_loglik(y, X, v) == pytest.approx(reml_loglik(y, X, np.diag(v)), rel=1e-12)


@st.composite
def gls_problem(draw):
    k = draw(st.integers(3, 15))
    p = draw(st.integers(1, min(3, k - 1)))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(k)] + [rng.normal(size=k) for _ in range(p - 1)])
    A = rng.normal(size=(k, k))
    M = A @ A.T / k + np.diag(rng.uniform(0.1, 1, k))
    return rng.normal(size=k), X, M


@given(gls_problem())
def test_gls_residual_orthogonality(prob):
    y, X, M = prob
    f = wls_fit(y, X, M)
    g = X.T @ np.linalg.solve(M, f.residuals)
    assert np.max(np.abs(g)) <= 1e-8 * max(1.0, np.abs(X).max() * np.abs(y).max() * np.abs(np.linalg.inv(M)).max())


@given(gls_problem())
def test_reml_invariant_to_reparameterization(prob):
    y, X, M = prob
    T = np.triu(np.ones((X.shape[1], X.shape[1]))) + np.eye(X.shape[1])
    assert reml_loglik(y, X @ T, M) == pytest.approx(reml_loglik(y, X, M), rel=1e-8, abs=1e-8)


@given(st.integers(0, 2**32 - 1))
def test_q_statistic_matches_weighted_rss(seed):
    rng = np.random.default_rng(seed)
    k = 10
    y, v = rng.normal(size=k), rng.uniform(0.1, 1, k)
    X = np.column_stack([np.ones(k), rng.normal(size=k)])
    f = wls_fit(y, X, v)
    assert q_statistic(y, X, 1 / v) == pytest.approx(np.sum(f.residuals**2 / v), rel=1e-10)
