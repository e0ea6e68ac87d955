import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES, load_fixture
from metakit.errors import InsufficientDataError, SchemaError
from metakit.ingest import load_csv
from metakit.robust import cluster_robust, robust_coef_tests
from metakit.uni import UniModelSpec, fit_uni

MODS = {"intercept": [], "within": ["within"], "both": ["within", "between"]}
CASES = load_fixture("clubsandwich_reference.json")["cases"]


@pytest.fixture(scope="module")
def robu():
    return load_csv(FIXTURES / "robumeta_correlated_effects.csv", {"study": "categorical"})


@pytest.mark.parametrize("c", CASES, ids=lambda c: f"{c['variances']}-{c['model']}-{c['method']}")
def test_cr2_matches_clubsandwich(robu, c):
    y, v = robu.real("effect"), robu.real(c["variances"])
    X = np.column_stack([np.ones(len(y))] + [robu.real(m) for m in MODS[c["model"]]])
    f = fit_uni(UniModelSpec(method=c["method"], test="wald_z"), y, v, X)
    assert f.tau2 == pytest.approx(c["tau2"], rel=1e-4, abs=1e-8)
    r = cluster_robust(f, robu["study"])
    assert r.n_clusters == c["n_groups"]
    np.testing.assert_allclose(f.b, c["beta"], rtol=1e-4)
    np.testing.assert_allclose(r.se, c["se"], rtol=1e-4)
    np.testing.assert_allclose(r.df, c["dof"], rtol=1e-4)
    t = robust_coef_tests(r, f)
    np.testing.assert_allclose([row["p"] for row in t.rows], c["pval"], atol=1e-4)


def test_unknown_type(robu):
    f = fit_uni(UniModelSpec(test="wald_z"), robu.real("effect"), robu.real("var_within_study"))
    with pytest.raises(SchemaError):
        cluster_robust(f, robu["study"], type="CR3")


def test_single_cluster_is_insufficient():
    f = fit_uni(UniModelSpec(test="wald_z"), [0.1, 0.3, 0.2], [0.1, 0.1, 0.1])
    with pytest.raises(InsufficientDataError):
        cluster_robust(f, np.array(["a", "a", "a"], dtype=object))


@st.composite
def clustered(draw):
    G = draw(st.integers(3, 12))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    sizes = rng.integers(1, 5, G)
    cl = np.repeat([f"c{g}" for g in range(G)], sizes).astype(object)
    k = len(cl)
    p = 2 if k > G + 2 else 1
    X = np.column_stack([np.ones(k)] + [rng.normal(size=k) for _ in range(p - 1)])
    return rng.normal(size=k), rng.uniform(0.05, 1, k), X, cl, G


@given(clustered(), st.sampled_from(["FE", "DL", "REML"]))
def test_cr1_is_scaled_cr0(data, method):
    y, v, X, cl, G = data
    f = fit_uni(UniModelSpec(method=method, test="wald_z"), y, v, X)
    c0 = cluster_robust(f, cl, "CR0").cov_robust
    c1 = cluster_robust(f, cl, "CR1").cov_robust
    np.testing.assert_allclose(c1, c0 * G / (G - 1), rtol=1e-12, atol=1e-15)


@given(st.integers(2, 15), st.integers(1, 6), st.integers(0, 2**32 - 1), st.floats(0.01, 3))
def test_balanced_cr2_df(G, m, seed, vi):
    rng = np.random.default_rng(seed)
    k = G * m
    cl = np.repeat(np.arange(G), m).astype(str)
    f = fit_uni(UniModelSpec(method="FE", test="wald_z"), rng.normal(size=k), np.full(k, vi))
    r = cluster_robust(f, cl, "CR2")
    assert r.df[0] == pytest.approx(G - 1, rel=1e-8)
