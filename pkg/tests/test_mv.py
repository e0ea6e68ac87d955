import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize

from conftest import FIXTURES
from metakit.errors import FormatError, PSDViolationError, SchemaError
from metakit.ingest import Dataset, load_csv
from metakit.kernel import reml_loglik
from metakit.mv import (VcalcSpec, ci_sigma_profile, fit_mv, inclusion_tests, indicator_cross, load_precomputed_V,
                        nested_components, save_V, vcalc)
from metakit.uni import UniModelSpec, fit_uni


@pytest.fixture(scope="module")
def robu():
    d = load_csv(FIXTURES / "robumeta_correlated_effects.csv", {"study": "categorical"})
    d = d.with_column("esid", [str(i) for i in range(len(d))], "categorical")
    return d.with_column("vi", d.real("var_within_study"))


@pytest.fixture(scope="module")
def ml_fit(robu):
    comps = nested_components(robu, "study", "esid")
    return fit_mv(robu.real("effect"), None, np.diag(robu.real("vi")), comps)


def test_one_level_collapses_to_uni():
    rng = np.random.default_rng(1)
    y, v = rng.normal(size=20), rng.uniform(0.1, 1, 20)
    fm = fit_mv(y, None, np.diag(v), {"s": np.arange(20).astype(str)}, test="wald_z")
    fu = fit_uni(UniModelSpec(test="wald_z"), y, v)
    assert fm.sigma2["s"] == pytest.approx(fu.tau2, rel=1e-5, abs=1e-8)
    assert fm.b[0] == pytest.approx(fu.b[0], rel=1e-6)
    assert fm.loglik == pytest.approx(fu.loglik, rel=1e-8)


def test_reml_matches_brute_force(robu, ml_fit):
    y, v = robu.real("effect"), robu.real("vi")
    X = np.ones((len(y), 1))
    Z1 = indicator_cross(robu["study"])

    def nll(s):
        s1, s2 = np.exp(s)
        return -reml_loglik(y, X, np.diag(v) + s1 * Z1 + s2 * np.eye(len(y)))

    best = min((optimize.minimize(nll, x0, method="Nelder-Mead", options=dict(xatol=1e-10, fatol=1e-12,
                                                                                maxiter=5000))
                for x0 in ([-2, -2], [0, -4], [-4, 0])), key=lambda r: r.fun)
    assert ml_fit.loglik >= -best.fun - 1e-7
    assert ml_fit.loglik == pytest.approx(-best.fun, abs=1e-5)


def test_inclusion_tests_and_profile_ci(ml_fit):
    t = inclusion_tests(ml_fit)
    assert [r["component"] for r in t.rows] == ["study", "study/esid", "study + study/esid"]
    for row in t.rows:
        assert row["LRT"] >= -1e-8 and 0 <= row["p"] <= 1
    for c in ml_fit.components:
        ci = ci_sigma_profile(ml_fit, c)
        assert ci.lower <= ml_fit.sigma2[c] <= ci.upper


def test_vcalc_psd_violation():
    d = Dataset.from_columns({"s": ["a", "a", "a"], "vi": [0.1, 0.1, 0.1]}, {"s": "categorical", "vi": "real"})
    with pytest.raises(PSDViolationError):
        vcalc(VcalcSpec("s", rho_within_type=-0.9), d)
    with pytest.raises(SchemaError):
        VcalcSpec("s", rho_within_type=1.5)


def test_save_load_round_trip(tmp_path, robu):
    V = vcalc(VcalcSpec("study", rho_within_type=0.6), robu)
    save_V(V, tmp_path / "V.csv")
    W = load_precomputed_V(tmp_path / "V.csv", robu)
    np.testing.assert_array_equal(W.V, V.V)


def test_load_bad_V(tmp_path, robu):
    (tmp_path / "bad.csv").write_text("1,2\n3\n")
    with pytest.raises(FormatError):
        load_precomputed_V(tmp_path / "bad.csv", robu)


def test_unknown_cluster_column(robu):
    with pytest.raises(SchemaError):
        vcalc(VcalcSpec("nope"), robu)


@st.composite
def vcalc_case(draw):
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    k = draw(st.integers(2, 25))
    cl = [f"s{int(x)}" for x in rng.integers(0, max(1, k // 3), k)]
    ty = [f"t{int(x)}" for x in rng.integers(0, 3, k)]
    d = Dataset.from_columns({"s": cl, "c": [str(i) for i in range(k)], "t": ty, "vi": rng.uniform(0.01, 2, k)},
                             {"s": "categorical", "c": "categorical", "t": "categorical", "vi": "real"})
    rw = draw(st.floats(0, 0.95))
    rb = draw(st.floats(0, rw))
    return d, VcalcSpec("s", construct="c", construct_type="t", rho_within_type=rw, rho_between_type=rb)


@given(vcalc_case())
def test_vcalc_block_diagonal_and_psd(case):
    d, spec = case
    V = vcalc(spec, d).V
    s = np.array(d["s"], dtype=object)
    assert np.all(V[s[:, None] != s[None, :]] == 0.0)
    np.testing.assert_array_equal(np.diag(V), d.real("vi"))
    np.testing.assert_array_equal(V, V.T)
    assert np.linalg.eigvalsh(V).min() >= -1e-10 * np.abs(V).max()
