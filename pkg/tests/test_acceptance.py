"""Acceptance criteria 1-7. Each test prints one ``CRITERION n: PASS|FAIL`` line.

Criteria that depend on the writing-to-learn or recidivism datasets read
``tests/data/writing_to_learn.csv`` and ``tests/data/recidivism.csv``; when a
file is absent the criterion fails with an explicit "dataset unavailable"
reason rather than being skipped.
"""

import json
import math
import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from metakit.cli import main
from metakit.pubbias import begg_rank, egger_regression, failsafe_n, trim_and_fill
from metakit.uni import (UniModelSpec, ci_tau2, estimate_tau2, fit_mh, fit_peto, fit_uni,
                         subgroup_analysis, tables_from_columns)

HERE = Path(__file__).resolve().parent
ROOT = HERE.parent
CONFIGS = ROOT / "configs"
DATA = HERE / "data"
W2L = DATA / "writing_to_learn.csv"
RECID = DATA / "recidivism.csv"

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def _report(n, checks):
        """``checks``: list of (label, ok, detail); ok is True/False."""
        ok = all(c[1] for c in checks)
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}")
            for label, good, detail in checks:
                print(f"  [{'ok' if good else 'FAIL'}] {label}: {detail}")
        failed = [f"{c[0]} ({c[2]})" for c in checks if not c[1]]
        assert ok, "; ".join(failed)
    return _report


def _unavailable(path):
    return (path.name, False, f"dataset unavailable: {path.relative_to(ROOT)} not present")


def _fit_bundle(config, out):
    t = time.perf_counter()
    code = main(["fit", "--config", str(CONFIGS / config), "--out", str(out)])
    elapsed = time.perf_counter() - t
    b = json.loads((out / "bundle.json").read_text()) if (out / "bundle.json").exists() else None
    return code, b, elapsed


def _rows(bundle, name):
    t = bundle["tables"][name]
    return [dict(zip(t["columns"], r)) for r in t["rows"]]


def _by_first(bundle, name):
    return {next(iter(r.values())): r for r in _rows(bundle, name)}


def _within(label, got, want, tol):
    ok = got is not None and math.isfinite(got) and abs(got - want) <= tol
    return (label, ok, f"got {got:.6g}, want {want} +/- {tol}" if got is not None else "missing")


# ---------------------------------------------------------------- 1


def test_criterion_1_recidivism_headline(tmp_path, report):
    if not RECID.exists():
        report(1, [_unavailable(RECID)])
    code, b, elapsed = _fit_bundle("recidivism.yaml", tmp_path)
    if code != 0:
        report(1, [("fit", False, f"exit code {code}: {b['errors'] if b else ''}")])
    r = _by_first(b, "meta_analytic_estimates")["pooled_effect"]
    report(1, [
        _within("estimate", r["estimate"], 0.36, 0.005),
        _within("ci_lower", r["ci_lower"], 0.16, 0.01),
        _within("ci_upper", r["ci_upper"], 0.56, 0.01),
        _within("t", r["stat"], 3.86, 0.005),
        _within("df", r["df"], 3.9, 0.1),
        _within("p", r["p"], 0.002, 0.0005),
        ("runtime", elapsed < 5, f"{elapsed:.2f} s (< 5 s)"),
    ])

# ---------------------------------------------------------------- 2


def test_criterion_2_bcg_subgroup(bcg, report):
    t = time.perf_counter()
    r = subgroup_analysis(UniModelSpec(), bcg.real("yi"), bcg.real("vi"), bcg["alloc"])
    elapsed = time.perf_counter() - t
    report(2, [_within("subgroup-differences p", r.p, 0.361, 0.005),
               ("runtime", elapsed < 2, f"{elapsed:.3f} s (< 2 s)")])

# ---------------------------------------------------------------- 3


def test_criterion_3_writing_to_learn_missingness(tmp_path, report):
    if not W2L.exists():
        report(3, [_unavailable(W2L)])
    code, b, _ = _fit_bundle("writing_to_learn.yaml", tmp_path)
    if code != 0:
        report(3, [("fit", False, f"exit code {code}")])
    n = b["provenance"]["rows"]["omitted"]
    report(3, [("rows omitted", n == 3, f"{n} (want exactly 3)")])

# ---------------------------------------------------------------- 4


def test_criterion_4_qualitative(bcg_fit, tmp_path, report):
    checks = []
    _, p = bcg_fit.stat_p(float(bcg_fit.b[0]), float(bcg_fit.se[0]))
    checks.append(("BCG pooled effect rejects", p < 0.05, f"p = {p:.3g}"))
    checks.append(("BCG heterogeneity rejects", bcg_fit.QEp < 0.05, f"p = {bcg_fit.QEp:.3g}"))
    if W2L.exists():
        code, b, _ = _fit_bundle("writing_to_learn.yaml", tmp_path / "w")
        code2, b2, _ = _fit_bundle("writing_to_learn_scale.yaml", tmp_path / "s")
        if code == 0 and code2 == 0:
            terms = _by_first(b, "meta_regression_terms")
            for t in ("length", "feedback"):
                checks.append((f"W2L term {t} does not reject", terms[t]["p"] >= 0.05, f"p = {terms[t]['p']:.3g}"))
            fb = [r for r in _rows(b, "emm") if r["term"] == "feedback"]
            checks.append(("W2L feedback EMMs nonzero", len(fb) == 2 and all(r["p"] < 0.05 for r in fb),
                           ", ".join(f"{r['level']}: p = {r['p']:.3g}" for r in fb)))
            sc = _by_first(b2, "meta_regression_coefficients").get("scale:length")
            checks.append(("W2L scale slope on length not significant", sc is not None and sc["p"] >= 0.05,
                           f"p = {sc['p']:.3g}" if sc else "missing"))
        else:
            checks.append(("writing-to-learn fits", False, f"exit codes {code}, {code2}"))
    else:
        checks.append(_unavailable(W2L))
    if RECID.exists():
        code, b, _ = _fit_bundle("recidivism.yaml", tmp_path / "r")
        if code == 0:
            inc = _rows(b, "component_inclusion_tests")
            checks.append(("recidivism inclusion LRTs reject", all(r["p"] < 0.05 for r in inc),
                           ", ".join(f"{r['component']}: p = {r['p']:.3g}" for r in inc)))
        else:
            checks.append(("recidivism fit", False, f"exit code {code}"))
    else:
        checks.append(_unavailable(RECID))
    report(4, checks)

# ---------------------------------------------------------------- 5


def _close(label, got, want, rel=1e-4, abs_=0.0, note=""):
    ok = abs(got - want) <= max(rel * abs(want), abs_)
    return (label, ok, f"got {got:.8g}, oracle {want}{note}")


PRINTED = " (oracle printed to 4 decimals; tolerance is half a unit in the last place)"


def test_criterion_5_oracle_suite(bcg, bcg_yv, report):
    t0 = time.perf_counter()
    y, v = bcg_yv
    checks = []
    # metafor rma(yi, vi, data = dat.bcg), printed output
    f = fit_uni(UniModelSpec(test="wald_z"), y, v)
    q = ci_tau2(f)
    checks += [
        _close("REML tau2", f.tau2, 0.3132, abs_=5e-5, note=PRINTED),
        _close("pooled estimate", f.b[0], -0.7145, abs_=5e-5, note=PRINTED),
        _close("I2 (%)", f.I2, 92.22, abs_=5e-3, note=" (printed to 2 decimals)"),
        _close("Q-profile tau2 lower", q.lower, 0.1197, abs_=5e-5, note=PRINTED),
        _close("Q-profile tau2 upper", q.upper, 1.1115, abs_=5e-5, note=PRINTED),
    ]
    # DL and Paule-Mandel: statsmodels combine_effects at full precision
    from statsmodels.stats.meta_analysis import combine_effects
    for m, sm in (("DL", "dl"), ("PM", "iterated")):
        checks.append(_close(f"{m} tau2", estimate_tau2(m, y, v).tau2, combine_effects(y, v, method_re=sm).tau2,
                             note=" (statsmodels)"))
    # Egger: the reference test is a meta-regression on sei; that model class is
    # validated against metafor in test_uni (rma.uni reference cases)
    e = egger_regression(y, v)
    ref = fit_uni(UniModelSpec(), y, v, np.column_stack([np.ones(len(y)), np.sqrt(v)]))
    checks.append(_close("Egger p", e.p, float(ref.coef_table()["p"][1]), rel=1e-6,
                         note=" (sei meta-regression)"))
    # Begg: metafor prints tau = 0.0256; p from the continuity-corrected normal formula
    bg = begg_rank(y, v)
    k = len(y)
    s_stat = round(bg.tau * k * (k - 1) / 2)
    p_ref = 2 * stats.norm.sf((abs(s_stat) - 1) / math.sqrt(k * (k - 1) * (2 * k + 5) / 18))
    checks.append(_close("Begg tau", bg.tau, 0.0256, abs_=5e-5, note=PRINTED))
    checks.append(_close("Begg p", bg.p, p_ref, rel=1e-6, note=" (normal approximation, k > 12)"))
    # trim-and-fill: no reference output available offline
    tf = trim_and_fill(y, v)
    checks.append(("trim-and-fill k0", False, f"k0 = {tf.k0} ({tf.side}); no reference trimfill output available "
                                              "to compare against"))
    checks.append(("fail-safe N (Rosenthal)", failsafe_n(y, v).N == 598, f"{failsafe_n(y, v).N}, oracle 598"))
    T = tables_from_columns(*(bcg.real(c) for c in ("tpos", "tneg", "cpos", "cneg")))
    import statsmodels.api as sm
    st_ = sm.stats.StratifiedTable([np.array([[t.a, t.b], [t.c, t.d]]) for t in T])
    checks.append(_close("MH log RR", fit_mh(T, "RR").estimate, math.log(st_.riskratio_pooled),
                         note=" (statsmodels StratifiedTable)"))
    # Peto: sum(O - E) / sum(V) from the hypergeometric moments
    a, n1, c, n2 = (np.array([getattr(t, x) for t in T]) for x in ("a", "n1", "c", "n2"))
    n, m1 = n1 + n2, a + c
    E = n1 * m1 / n
    V = n1 * n2 * m1 * (n - m1) / (n**2 * (n - 1))
    checks.append(_close("Peto log OR", fit_peto(T).estimate, float(np.sum(a - E) / np.sum(V)),
                         note=" (direct O - E formula)"))
    for path, what in ((RECID, "recidivism sigma2 components and profile CIs"),
                       (W2L, "writing-to-learn EMMs and contrasts")):
        checks.append((what, False, f"dataset unavailable ({path.name}) and no reference output"))
    elapsed = time.perf_counter() - t0
    checks.append(("runtime", elapsed < 60, f"{elapsed:.2f} s (< 60 s)"))
    report(5, checks)

# ---------------------------------------------------------------- 6

PROPERTY_TESTS = [
    "test_uni.py::test_shift_scale_equivariance",
    "test_uni.py::test_permutation_invariance",
    "test_uni.py::test_pi_contains_ci",
    "test_kernel.py::test_gls_residual_orthogonality",
    "test_kernel.py::test_reml_invariant_to_reparameterization",
    "test_mv.py::test_vcalc_block_diagonal_and_psd",
    "test_robust.py::test_cr1_is_scaled_cr0",
    "test_robust.py::test_balanced_cr2_df",
    "test_postfit.py::test_emm_contrast_consistency",
    "test_plots.py::test_svg_determinism_and_marker_parity",
]


def test_criterion_6_property_suites(report):
    t = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           "--hypothesis-show-statistics", *[str(HERE / p) for p in PROPERTY_TESTS]],
                          cwd=ROOT, capture_output=True, text=True)
    elapsed = time.perf_counter() - t
    counts = [int(x) for x in re.findall(r"(\d+) passing examples", proc.stdout)]
    checks = [("all property tests pass", proc.returncode == 0, proc.stdout.strip().splitlines()[-1]),
              ("instances per property >= 200", len(counts) >= len(PROPERTY_TESTS) and min(counts) >= 200,
               f"min {min(counts) if counts else 0} over {len(counts)} generate phases"),
              ("runtime", elapsed < 120, f"{elapsed:.1f} s (< 120 s)")]
    report(6, checks)

# ---------------------------------------------------------------- 7


def test_criterion_7_golden_plots(tmp_path, report):
    checks = []
    for config, name in (("bcg.yaml", "funnel.svg"), ("bcg.yaml", "forest.svg"), ("bcg_regression.yaml", "bubble.svg")):
        out = tmp_path / config
        runs = []
        for i in range(2):
            main(["plot", "--config", str(CONFIGS / config), "--out", str(out / str(i))])
            runs.append((out / str(i) / name).read_text(encoding="utf-8"))
        gold = (HERE / "golden" / "bcg" / name).read_text(encoding="utf-8")
        checks.append((f"BCG {name}", runs[0] == runs[1] == gold, "byte-identical to golden file"
                       if runs[0] == runs[1] == gold else "differs from golden file"))
    for path, ex in ((W2L, "writing-to-learn"), (RECID, "recidivism")):
        g = HERE / "golden" / ex
        if path.exists() and g.is_dir():
            config = {"writing-to-learn": "writing_to_learn.yaml", "recidivism": "recidivism.yaml"}[ex]
            main(["plot", "--config", str(CONFIGS / config), "--out", str(tmp_path / ex)])
            for gf in sorted(g.glob("*.svg")):
                same = (tmp_path / ex / gf.name).read_text(encoding="utf-8") == gf.read_text(encoding="utf-8")
                checks.append((f"{ex} {gf.name}", same, "byte-identical" if same else "differs"))
        else:
            checks.append((f"{ex} plots", False, f"dataset unavailable ({path.name}); no golden files"))
    report(7, checks)
