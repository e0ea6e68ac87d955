import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from metakit.errors import SchemaError
from metakit.ingest import Dataset
from metakit.kernel import build_design
from metakit.postfit import (baujat, casewise_diagnostics, contrasts, emm, emm_continuous, predict_effects,
                             profile_tau2)
from metakit.uni import UniModelSpec, fit_uni, pooled_estimate


def test_intercept_only_emm_is_pooled(bcg_fit):
    (r,) = emm(bcg_fit)
    est, se, ci = pooled_estimate(bcg_fit)
    assert r.estimate == pytest.approx(est) and r.se == pytest.approx(se)
    assert (r.ci_lower, r.ci_upper) == pytest.approx((ci.lower, ci.upper))


def test_emm_levels_and_contrasts(bcg_reg):
    rows = emm(bcg_reg, "alloc")
    assert [r.level for r in rows] == ["alternate", "random", "systematic"]
    c = contrasts(bcg_reg, "alloc")
    assert len(c.rows) == 3
    by = {r.level: r.estimate for r in rows}
    first = c.rows[0]
    assert first["comparison"] == "alternate - random"
    assert first["estimate"] == pytest.approx(by["alternate"] - by["random"], abs=1e-12)
    # unweighted difference between a level and the reference equals minus its dummy coefficient
    j = bcg_reg.design.column_names.index("alloc[random]")
    assert first["estimate"] == pytest.approx(-bcg_reg.b[j], abs=1e-12)


def test_emm_continuous_spread(bcg_reg, bcg):
    lo, hi = emm_continuous(bcg_reg, "ablat")
    x = bcg.real("ablat")
    assert lo.level == pytest.approx(x.mean() - x.std(ddof=1))
    assert hi.estimate - lo.estimate == pytest.approx(2 * x.std(ddof=1) * bcg_reg.b[1], rel=1e-10)


def test_emm_unknown_term(bcg_reg):
    with pytest.raises(SchemaError):
        emm(bcg_reg, "year_of_nothing")


def test_emm_rows_contain_estimate(bcg_reg):
    for w in ("weighted", "unweighted"):
        for r in emm(bcg_reg, "alloc", w):
            assert r.ci_lower < r.estimate < r.ci_upper and r.se > 0


def test_rstudent_from_leave_one_out(bcg_fit):
    t = casewise_diagnostics(bcg_fit)
    y, v = bcg_fit.y, bcg_fit.v
    for i in (0, 5, 12):
        keep = np.arange(len(y)) != i
        g = fit_uni(UniModelSpec(), y[keep], v[keep])
        row = t.rows[i]
        assert row["loo_tau2"] == pytest.approx(g.tau2, rel=1e-6)
        expect = (y[i] - g.b[0]) / np.sqrt(v[i] + g.tau2 + g.cov_b[0, 0])
        assert row["rstudent"] == pytest.approx(expect, rel=1e-5)


def test_hat_values_sum_to_p(bcg_reg):
    t = casewise_diagnostics(bcg_reg)
    assert sum(r["hat"] for r in t.rows) == pytest.approx(bcg_reg.p, rel=1e-10)
    assert sum(r["weight"] for r in t.rows) == pytest.approx(100.0)


def test_baujat_and_profile(bcg_fit):
    pts = baujat(bcg_fit)
    assert len(pts) == 13 and all(p.x >= 0 and p.y >= 0 for p in pts)
    ll = profile_tau2(bcg_fit, [0.1, bcg_fit.tau2, 1.0])
    assert ll[1] >= ll[0] and ll[1] >= ll[2]
    assert ll[1] == pytest.approx(bcg_fit.loglik, rel=1e-10)


def test_predictions_pi_wider(bcg_reg):
    p = predict_effects(bcg_reg)
    assert np.all(p.pi_lower <= p.ci_lower) and np.all(p.pi_upper >= p.ci_upper)
    np.testing.assert_allclose(p.pred, bcg_reg.X @ bcg_reg.b)


@st.composite
def factor_data(draw):
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    k = draw(st.integers(8, 30))
    g = [["a", "b", "c"][i % 3] for i in range(k)]
    h = [str(x) for x in rng.integers(0, 2, k)]
    if len(set(h)) < 2:
        h[0], h[1] = "0", "1"
    d = Dataset.from_columns({"g": g, "h": h, "x": rng.normal(size=k), "y": rng.normal(size=k),
                              "v": rng.uniform(0.05, 1, k)},
                             {"g": "categorical", "h": "categorical", "x": "real", "y": "real", "v": "real"})
    return d


@given(factor_data(), st.sampled_from(["weighted", "unweighted"]))
def test_emm_contrast_consistency(d, weighting):
    dm = build_design(d, ["g", "h", "x"], check_rank=False)
    assume(np.linalg.matrix_rank(dm.X) == dm.X.shape[1])
    f = fit_uni(UniModelSpec(method="DL"), d.real("y"), d.real("v"), dm, data=d)
    rows = {r.level: r for r in emm(f, "g", weighting)}
    c = contrasts(f, "g", weighting)
    for row in c.rows:
        a, b = row["comparison"].split(" - ")
        assert row["estimate"] == pytest.approx(rows[a].estimate - rows[b].estimate, abs=1e-10)
        diff = rows[a].c - rows[b].c
        assert row["se"] == pytest.approx(np.sqrt(diff @ f.cov_b @ diff), rel=1e-10)
    # additive model: contrasts do not depend on the weighting of other terms
    other = contrasts(f, "g", "unweighted" if weighting == "weighted" else "weighted")
    for r1, r2 in zip(c.rows, other.rows):
        assert r1["estimate"] == pytest.approx(r2["estimate"], abs=1e-10)
