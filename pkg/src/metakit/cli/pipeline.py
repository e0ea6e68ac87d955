"""Config-driven analysis: ingest, effect sizes, fitting, result tables, plots."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..errors import MetakitError, SchemaError
from ..escalc import append_effect_sizes, compute_rows
from ..ingest import CATEGORICAL, REAL, apply_subset, complete_cases, load_csv, transform_column
from ..kernel import build_design, parse_term
from ..mv import VcalcSpec, ci_sigma_profile, fit_mv, inclusion_tests, load_precomputed_V, nested_components
from ..mv import save_V, vcalc
from ..plots import PlotSpec, bubble_svg, forest_svg, funnel_svg
from ..postfit import casewise_diagnostics, contrasts, contrasts_scale, emm, emm_continuous, emm_scale
from ..postfit.emm import _location, reference_vector
from ..pubbias import begg_rank, egger_regression, failsafe_n, trim_and_fill
from ..robust import cluster_robust
from ..tables import ResultTable
from ..uni import (UniModelSpec, ci_tau2, fit_location_scale, fit_mh, fit_peto, fit_uni, heterogeneity_stats,
                   subgroup_analysis, tables_from_columns, wald_test)
from ..uni.model import moderator_index

DEFAULT_MAX_FAILED = 0.5
_TF = {"none": lambda x: x, "exp": math.exp, "tanh": math.tanh}


@dataclass
class StepCount:
    step: int
    measure: str
    attempted: int
    computed: int
    failed_rows: list

    def line(self):
        return f"step {self.step} ({self.measure}): {self.computed} of {self.attempted} computed"


@dataclass
class Prepared:
    data: object                 # dataset with yi/vi/sei
    counts: list = field(default_factory=list)


def prepare_data(cfg) -> Prepared:
    """Load, subset, transform and compute (or map) effect sizes."""
    d = load_csv(cfg.resolve(cfg["data"]), cfg.get("type_hints"))
    if "subset" in cfg:
        d = apply_subset(d, cfg["subset"]["column"], cfg["subset"]["values"])
    for t in cfg.get("transforms", []):
        d = transform_column(d, t["source"], t["function"], t["target"])
    es = cfg["effect_size"]
    counts = []
    if "compute" in es:
        for i, step in enumerate(es["compute"]):
            sub = d
            if "subset" in step:
                sub = apply_subset(d, step["subset"]["column"], step["subset"]["values"])
            for col in step["columns"].values():
                d._check(col)
            recs = compute_rows(sub, step["measure"], step["columns"], step.get("exact_j", False))
            d = append_effect_sizes(d, recs, fill=i > 0)
            counts.append(StepCount(i + 1, step["measure"], len(recs), sum(r.estimable for r in recs),
                                    [r.row_id for r in recs if not r.estimable]))
    else:
        m = es["columns"]
        yi = d.real(m["yi"])
        if "vi" in m:
            vi = d.real(m["vi"])
        else:
            vi = d.real(m["sei"]) ** 2
        bad = ~(vi > 0)
        vi = np.where(bad, np.nan, vi)
        d = d.with_column("yi", yi, REAL, replace=True) if m["yi"] != "yi" else d
        d = d.with_column("vi", vi, REAL, replace=True)
        d = d.with_column("sei", np.sqrt(vi), REAL, replace=True)
        ok = ~np.isnan(yi) & ~np.isnan(vi)
        counts.append(StepCount(1, "mapped", len(d), int(ok.sum()), [int(r) for r in d.row_ids[~ok]]))
    return Prepared(d, counts)


def failed_fraction(counts):
    if not counts:
        return 0.0
    last = counts[-1]
    return 1.0 - last.computed / last.attempted if last.attempted else 1.0


def _model_vars(cfg):
    m = cfg.model
    out = ["yi", "vi"]
    for t in m.get("moderators", []) + m.get("scale", []):
        out += [v for v in parse_term(t) if v not in out]
    for key in ("subgroup",):
        if key in m and m[key] not in out:
            out.append(m[key])
    if "random" in m:
        out += [m["random"][k] for k in ("level1", "level2") if k in m["random"]]
    if "vcalc" in m:
        out += [m["vcalc"][k] for k in ("cluster", "construct", "construct_type") if k in m["vcalc"]]
    if "clustering" in cfg:
        out.append(cfg["clustering"]["column"])
    seen = []
    for v in out:
        if v not in seen:
            seen.append(v)
    return seen


@dataclass
class Analysis:
    cfg: object
    data: object              # complete-case dataset used for fitting
    all_data: object
    fit: object
    robust: object = None
    subgroup: object = None
    omitted: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def transform(self):
        return self.cfg.model.get("transform", "none")

    @property
    def level(self):
        return self.cfg.model.get("ci_level", 0.95)


def _uni_spec(m):
    return UniModelSpec(method=m.get("method", "REML"), test=m.get("test", "knapp_hartung"),
                        fixed_tau2=m.get("fixed_tau2"), intercept=m.get("intercept", True),
                        transform=m.get("transform", "none"), ci_level=m.get("ci_level", 0.95),
                        truncate_kh=m.get("truncate_kh", False))


def fit_analysis(cfg, prep: Prepared) -> Analysis:
    """Complete-case filtering and the model fit (plus robust and subgroup parts)."""
    m = cfg.model
    d_all = prep.data
    rep = complete_cases(d_all, _model_vars(cfg))
    d = d_all.rows_for(rep.kept_row_ids)
    y, v = d.real("yi"), d.real("vi")
    dm = build_design(d, m.get("moderators", []), m.get("intercept", True))
    an = Analysis(cfg, d, d_all, None, omitted=dict(rep.omitted_reasons))
    if cfg.is_multilevel:
        if "vcalc" in m:
            vc = m["vcalc"]
            V = vcalc(VcalcSpec(vc["cluster"], vc.get("construct"), vc.get("construct_type"),
                                vc.get("rho_within_type", 0.0), vc.get("rho_between_type", 0.0)), d)
        elif "V_file" in m:
            V = load_precomputed_V(cfg.resolve(m["V_file"]), d)
        else:
            V = np.diag(v)
        if "save_V" in m:
            save_V(getattr(V, "V", V), cfg.resolve(m["save_V"]))
        comps = nested_components(d, m["random"]["level1"], m["random"].get("level2"))
        an.fit = fit_mv(y, dm, V, comps, test=m.get("test", "t"), method=m.get("method", "REML"),
                        ci_level=m.get("ci_level", 0.95), row_ids=d.row_ids, data=d)
    elif m.get("scale"):
        dz = build_design(d, m["scale"], True)
        an.fit, _ = fit_location_scale(_uni_spec(m), y, v, dm, dz, data=d, row_ids=d.row_ids)
    else:
        an.fit = fit_uni(_uni_spec(m), y, v, dm, data=d, row_ids=d.row_ids)
    if "subgroup" in m:
        an.subgroup = subgroup_analysis(_uni_spec(m), y, v, list(d[m["subgroup"]]), d.row_ids)
    if "clustering" in cfg:
        cl = cfg["clustering"]
        an.robust = cluster_robust(an.fit, np.array([str(x) for x in d[cl["column"]]], dtype=object),
                                   cl.get("type", "CR2"), cl.get("allow_pinv", False))
    return an


# ---- tables ----------------------------------------------------------------

def _crit(df, level):
    return stats.t.ppf(0.5 + level / 2, df) if df is not None else stats.norm.ppf(0.5 + level / 2)


def _wald_robust(rf, idx):
    """Wald test with the robust covariance; df2 from Satterthwaite (minimum over
    the tested coefficients for multi-df terms)."""
    idx = list(idx)
    b = rf.b[idx]
    V = rf.cov_robust[np.ix_(idx, idx)]
    q = len(idx)
    W = float(b @ np.linalg.solve(V, b))
    df2 = float(min(rf.df[j] for j in idx))
    F = W / q
    return F, q, df2, float(stats.f.sf(F, q, df2))


def pooled_row(an: Analysis):
    """Overall (weighted marginal) effect with CI and PI, robust when clustering."""
    fit = an.fit
    inf = _location(fit, an.robust)
    c = reference_vector(inf, {}) if fit.design is not None else np.eye(fit.p)[0]
    est = float(c @ inf.b)
    se = math.sqrt(float(c @ inf.cov @ c))
    df = inf.df_of(c)
    q = _crit(df, an.level)
    stat = est / se
    p = 2 * (stats.t.sf(abs(stat), df) if df is not None else stats.norm.sf(abs(stat)))
    sf = getattr(fit, "scale", None)
    if sf is not None:
        from ..postfit.emm import _scale
        tau2 = float(sf.tau2_at(reference_vector(_scale(fit), {})))
    else:
        tau2 = fit.tau2
    h = q * math.sqrt(se**2 + tau2)
    return dict(parameter="pooled_effect", estimate=est, se=se, stat=stat, df=df, p=float(p),
                ci_lower=est - q * se, ci_upper=est + q * se, pi_lower=est - h, pi_upper=est + h)


def table_tests(an: Analysis) -> ResultTable:
    fit = an.fit
    tab = ResultTable("meta_analytic_tests", ["test", "stat", "df1", "df2", "p"], title="Meta-Analytic Tests")
    idx = moderator_index(fit.X, fit.design)
    if not idx:
        r = pooled_row(an)
        tab.add_row(test="effect_size", stat=r["stat"] ** 2, df1=1, df2=r["df"], p=r["p"])
    elif an.robust is not None:
        F, q, df2, p = _wald_robust(an.robust, idx)
        tab.add_row(test="moderators", stat=F, df1=q, df2=df2, p=p)
    else:
        tab.add_row(test="moderators", stat=fit.QM, df1=fit.QM_df[0],
                    df2=fit.QM_df[1] if len(fit.QM_df) > 1 else None, p=fit.QMp)
    tab.add_row(test="residual_heterogeneity", stat=fit.QE, df1=fit.QE_df, df2=None, p=fit.QEp)
    sf = getattr(fit, "scale", None)
    if sf is not None and sf.q > 1:
        wt = wald_test(sf.alpha, sf.cov_alpha, list(range(1, sf.q)))
        tab.add_row(test="scale_moderators", stat=wt.stat, df1=wt.df1, df2=None, p=wt.p)
    if an.subgroup is not None:
        sg = an.subgroup
        tab.add_row(test="subgroup_differences", stat=sg.Q_between, df1=sg.df, df2=None, p=sg.p)
        tab.footnotes += sg.flags
    if an.robust is not None:
        tab.footnotes.append(f"Moderator/effect tests use {an.robust.type} cluster-robust covariance "
                             f"({an.robust.n_clusters} clusters).")
    tab.footnotes.append("Statistics are F (df2 given) or chi-square (df2 empty).")
    return tab


def table_estimates(an: Analysis, prep: Prepared) -> ResultTable:
    cols = ["parameter", "estimate", "se", "stat", "df", "p", "ci_lower", "ci_upper", "pi_lower", "pi_upper"]
    tab = ResultTable("meta_analytic_estimates", cols, title="Meta-Analytic Estimates")
    r = pooled_row(an)
    tab.add_row(**r)
    tf = an.transform
    if tf != "none":
        f = _TF[tf]
        tab.add_row(parameter=f"pooled_effect[{tf}]", estimate=f(r["estimate"]), ci_lower=f(r["ci_lower"]),
                    ci_upper=f(r["ci_upper"]), pi_lower=f(r["pi_lower"]), pi_upper=f(r["pi_upper"]))
    if an.subgroup is not None:
        for g, gf in an.subgroup.fits.items():
            se = float(gf.se[0])
            est = float(gf.b[0])
            q = gf.crit()
            stat, p = gf.stat_p(est, se)
            h = q * math.sqrt(se**2 + gf.tau2)
            tab.add_row(parameter=f"subgroup[{g}]", estimate=est, se=se, stat=stat, df=gf.ddf, p=float(p),
                        ci_lower=est - q * se, ci_upper=est + q * se, pi_lower=est - h, pi_upper=est + h)
        for g, why in an.subgroup.excluded.items():
            tab.footnotes.append(f"subgroup {g}: not estimated ({why})")
    for method in an.cfg.model.get("pooled_2x2", []):
        step = an.cfg["effect_size"]["compute"][0]
        cm = step["columns"]
        dd = an.data
        tabs = tables_from_columns(*(dd.real(cm[x]) for x in "abcd"))
        meas = {"logRR": "RR", "logOR": "OR", "RD": "RD"}[step["measure"]]
        res = fit_mh(tabs, meas, an.level) if method == "MH" else fit_peto(tabs, an.level)
        name = f"MH_{meas}" if method == "MH" else "Peto_OR"
        tab.add_row(parameter=name, estimate=res.estimate, se=res.se, stat=res.z, df=None, p=res.p,
                    ci_lower=res.ci_lower, ci_upper=res.ci_upper)
        tab.footnotes.append(f"{name}: Q({res.QE_df}) = {res.QE:.4f}, p = {res.QEp:.4g}; "
                             f"{res.k_informative} of {res.k} tables informative.")
    if an.robust is not None:
        tab.footnotes.append(f"{an.robust.type} cluster-robust standard errors with Satterthwaite df.")
    return tab


def _term_tests(an):
    fit = an.fit
    out = {}
    if fit.design is None:
        return out
    for label, sl in fit.design.term_slices.items():
        idx = list(range(sl.start, sl.stop))
        if an.robust is not None:
            F, q, df2, p = _wald_robust(an.robust, idx)
            out[label] = (F, q, df2, p)
        else:
            wt = wald_test(fit.b, fit.cov_b, idx, fit.ddf)
            out[label] = (wt.stat, wt.df1, wt.df2, wt.p)
    return out


def table_terms(an: Analysis) -> ResultTable:
    tab = ResultTable("meta_regression_terms", ["term", "stat", "df1", "df2", "p"],
                      title="Meta-Regression Terms Tests")
    for label, (s, d1, d2, p) in _term_tests(an).items():
        tab.add_row(term=label, stat=s, df1=d1, df2=d2, p=p)
    sf = getattr(an.fit, "scale", None)
    if sf is not None:
        for label, wt in sf.term_tests().items():
            tab.add_row(term=f"scale:{label}", stat=wt.stat, df1=wt.df1, df2=None, p=wt.p)
    return tab


def table_coefficients(an: Analysis) -> ResultTable:
    fit = an.fit
    tab = ResultTable("meta_regression_coefficients",
                      ["term", "estimate", "se", "stat", "df", "p", "ci_lower", "ci_upper"],
                      title="Meta-Regression Coefficients")
    names = fit.column_names
    if an.robust is not None:
        rf = an.robust
        for j, n in enumerate(names):
            se, df = float(rf.se[j]), float(rf.df[j])
            t = float(rf.b[j]) / se
            q = _crit(df, an.level)
            tab.add_row(term=n, estimate=float(rf.b[j]), se=se, stat=t, df=df,
                        p=float(2 * stats.t.sf(abs(t), df)), ci_lower=float(rf.b[j]) - q * se,
                        ci_upper=float(rf.b[j]) + q * se)
        tab.footnotes.append(f"{rf.type} cluster-robust ({rf.n_clusters} clusters), Satterthwaite df.")
    else:
        ct = fit.coef_table()
        for j, n in enumerate(names):
            tab.add_row(term=n, estimate=float(ct["estimate"][j]), se=float(ct["se"][j]),
                        stat=float(ct["stat"][j]), df=ct["df"], p=float(ct["p"][j]),
                        ci_lower=float(ct["ci_lower"][j]), ci_upper=float(ct["ci_upper"][j]))
    sf = getattr(fit, "scale", None)
    if sf is not None:
        ct = sf.coef_table(an.level)
        for j, n in enumerate(ct["name"]):
            tab.add_row(term=f"scale:{n}", estimate=float(ct["estimate"][j]), se=float(ct["se"][j]),
                        stat=float(ct["stat"][j]), df=None, p=float(ct["p"][j]),
                        ci_lower=float(ct["ci_lower"][j]), ci_upper=float(ct["ci_upper"][j]))
        tab.footnotes.append("Scale coefficients are on the log(tau2) scale with Wald z tests.")
    return tab


def table_random(an: Analysis) -> ResultTable:
    fit = an.fit
    tab = ResultTable("random_effects_summary", ["parameter", "estimate", "ci_lower", "ci_upper", "n_levels"],
                      title="Random Effects / Heterogeneity")
    if hasattr(fit, "sigma2"):
        for n, s2 in fit.sigma2.items():
            lv = len(set(fit.components[n]))
            try:
                ci = ci_sigma_profile(fit, n, an.level) if n not in fit.fixed else None
            except MetakitError as e:
                ci = None
                tab.footnotes.append(f"{n}: profile interval unavailable ({e})")
            lo, hi = (ci.lower, ci.upper) if ci is not None else (None, None)
            label = n.replace("\x1f", "/")
            tab.add_row(parameter=f"sigma2[{label}]", estimate=s2, ci_lower=lo, ci_upper=hi, n_levels=lv)
            tab.add_row(parameter=f"sigma[{label}]", estimate=math.sqrt(s2),
                        ci_lower=None if lo is None else math.sqrt(lo),
                        ci_upper=None if hi is None else math.sqrt(hi), n_levels=lv)
            if ci is not None and ci.flags:
                tab.footnotes.append(f"{label}: " + "; ".join(ci.flags))
        tab.footnotes.append("Intervals are profile-likelihood intervals.")
        return tab
    if getattr(fit, "scale", None) is not None:
        tab.add_row(parameter="tau2_mean", estimate=fit.tau2)
        tab.footnotes.append("Heterogeneity varies by row (scale model); mean fitted tau2 shown.")
        return tab
    if fit.method == "FE":
        tab.add_row(parameter="I2", estimate=fit.I2)
        tab.add_row(parameter="H2", estimate=fit.H2)
        return tab
    try:
        ci = ci_tau2(fit, an.level)
        lo, hi = ci.lower, ci.upper
        tab.footnotes += list(ci.flags)
    except MetakitError as e:
        lo = hi = None
        tab.footnotes.append(f"tau2 interval unavailable ({e})")
    tab.add_row(parameter="tau2", estimate=fit.tau2, ci_lower=lo, ci_upper=hi)
    tab.add_row(parameter="tau", estimate=math.sqrt(fit.tau2), ci_lower=None if lo is None else math.sqrt(lo),
                ci_upper=None if hi is None else math.sqrt(hi))

    def het(t):
        return heterogeneity_stats(t, fit.v, fit.X, fit.QE, fit.method) if t is not None else (None, None)

    (i_lo, h_lo), (i_hi, h_hi) = het(lo), het(hi)
    tab.add_row(parameter="I2", estimate=fit.I2, ci_lower=i_lo, ci_upper=i_hi)
    tab.add_row(parameter="H2", estimate=fit.H2, ci_lower=h_lo, ci_upper=h_hi)
    tab.footnotes.append("tau2 interval from the Q-profile method.")
    return tab


def table_emm(an: Analysis):
    """(emm table, contrasts table) for the configured terms."""
    opts = an.cfg.get("outputs", {}).get("emm", {})
    w = opts.get("weighting", "weighted")
    adj = opts.get("adjust", "none")
    t0 = opts.get("test_against", 0.0)
    fit = an.fit
    etab = ResultTable("emm", ["term", "level", "estimate", "se", "ci_lower", "ci_upper", "stat", "df", "p"],
                       title="Estimated Marginal Means")
    ctab = ResultTable("contrasts", ["term", "comparison", "estimate", "se", "stat", "df", "p", "ci_lower",
                                     "ci_upper"], title="Contrasts")
    tf = an.transform
    terms = opts.get("terms", [None])

    def add(term, rows, scale=False):
        for r in rows:
            lab = r.level if not isinstance(r.level, float) else float(r.level)
            etab.add_row(term=term or "overall", level=lab, estimate=r.estimate, se=r.se, ci_lower=r.ci_lower,
                         ci_upper=r.ci_upper, stat=r.stat, df=r.df, p=r.p)
            if tf != "none" and not scale:
                f = _TF[tf]
                etab.add_row(term=f"{term or 'overall'}[{tf}]", level=lab, estimate=f(r.estimate),
                             ci_lower=f(r.ci_lower), ci_upper=f(r.ci_upper))

    def add_contrasts(term, tab):
        for row in tab.rows:
            ctab.add_row(term=term, **row)
        ctab.footnotes += [f for f in tab.footnotes if f not in ctab.footnotes]

    for term in terms:
        if term is None:
            add(None, emm(fit, None, w, t0, an.robust))
            continue
        kinds = fit.design.kinds if fit.design is not None else {}
        vars_ = parse_term(term)
        if any(v not in kinds for v in vars_):
            raise SchemaError(f"marginal-means term {term!r} is not in the model")
        if all(kinds[v] == CATEGORICAL for v in vars_):
            add(term, emm(fit, term, w, t0, an.robust))
            add_contrasts(term, contrasts(fit, term, w, adj, an.robust))
        else:
            add(term, emm_continuous(fit, term, w, t0, an.robust))
    sf = getattr(fit, "scale", None)
    if sf is not None and opts.get("scale", False):
        skinds = sf.design.kinds if sf.design is not None else {}
        for term in terms:
            if term is None:
                add("scale:overall", emm_scale(fit, None, w), True)
            elif all(v in skinds and skinds[v] == CATEGORICAL for v in parse_term(term)):
                add(f"scale:{term}", emm_scale(fit, term, w), True)
                add_contrasts(f"scale:{term}", contrasts_scale(fit, term, w, adj))
        etab.footnotes.append("Scale marginal means are tau2 (exp of the log-scale mean and interval).")
    if w == "unweighted":
        etab.footnotes.append("Unweighted: equal weight for each combination of other factor levels.")
    if an.robust is not None:
        etab.footnotes.append(f"{an.robust.type} cluster-robust covariance, Satterthwaite df.")
    return etab, ctab


def table_diagnostics(an: Analysis) -> ResultTable:
    if hasattr(an.fit, "sigma2"):
        raise SchemaError("casewise diagnostics are available for univariate models only")
    return casewise_diagnostics(an.fit)


def table_pubbias(an: Analysis, opts=None) -> ResultTable:
    opts = opts if opts is not None else an.cfg.get("outputs", {}).get("pubbias", {})
    fit = an.fit
    if hasattr(fit, "sigma2"):
        raise SchemaError("publication-bias methods are available for univariate models only")
    y, v = fit.y, fit.v
    m = an.cfg.model
    tab = ResultTable("pubbias", ["test", "estimate", "se", "stat", "df", "p", "k", "count", "side"],
                      title="Publication Bias")
    if opts.get("egger", True):
        e = egger_regression(y, v, m.get("test", "knapp_hartung"), m.get("method", "REML"))
        tab.add_row(test="egger", estimate=e.slope, se=e.se, stat=e.stat, df=e.df, p=e.p, k=len(y))
    if opts.get("begg", True):
        b = begg_rank(y, v)
        tab.add_row(test="begg", estimate=b.tau, p=b.p, k=b.k)
        tab.footnotes.append(f"Begg: Kendall tau-b, {b.method} p-value.")
    tf = opts.get("trim_and_fill", "L0")
    if tf != "none":
        t = trim_and_fill(y, v, tf, spec=_uni_spec(m))
        a = t.adjusted_fit
        q = a.crit()
        se = float(a.se[0])
        stat, p = a.stat_p(float(a.b[0]), se)
        tab.add_row(test=f"trim_and_fill[{tf}]", estimate=float(a.b[0]), se=se, stat=stat, df=a.ddf, p=float(p),
                    k=len(t.augmented_y), count=t.k0, side=t.side)
        tab.footnotes.append(f"trim_and_fill: adjusted CI [{a.b[0] - q * se:.4f}, {a.b[0] + q * se:.4f}], "
                             f"SE(k0) = {t.se_k0:.4f}.")
        tab.footnotes += t.flags
    for meth in opts.get("failsafe", ["Rosenthal"]):
        fs = failsafe_n(y, v, meth)
        tab.add_row(test=f"failsafe_n[{meth}]", estimate=fs.target if meth == "Orwin" else None, k=len(y),
                    count=fs.N)
        tab.footnotes += [f"failsafe_n[{meth}]: {f}" for f in fs.flags]
    return tab


DEFAULT_TABLES = ("meta_analytic_tests", "meta_analytic_estimates", "meta_regression_terms",
                  "meta_regression_coefficients", "random_effects_summary", "component_inclusion_tests")


def selected_tables(cfg, an):
    if "outputs" not in cfg:
        sel = list(DEFAULT_TABLES)
    else:
        sel = list(cfg["outputs"].get("tables", []))
    out = []
    for name in sel:
        if name in ("meta_regression_terms", "meta_regression_coefficients") and an.fit.p == 1 \
                and "outputs" not in cfg:
            continue
        if name == "component_inclusion_tests" and not cfg.is_multilevel:
            if "outputs" in cfg:
                raise SchemaError("component_inclusion_tests needs a multilevel model")
            continue
        out.append(name)
    return out


def build_tables(an: Analysis, prep: Prepared, names, failures):
    """Compute the named tables; failures are collected as ``(stage, error)``."""
    out = {}
    cache = {}
    for name in names:
        try:
            if name == "meta_analytic_tests":
                out[name] = table_tests(an)
            elif name == "meta_analytic_estimates":
                out[name] = table_estimates(an, prep)
            elif name == "meta_regression_terms":
                out[name] = table_terms(an)
            elif name == "meta_regression_coefficients":
                out[name] = table_coefficients(an)
            elif name == "random_effects_summary":
                out[name] = table_random(an)
            elif name == "component_inclusion_tests":
                out[name] = inclusion_tests(an.fit)
            elif name in ("emm", "contrasts"):
                if "emm" not in cache:
                    cache["emm"] = table_emm(an)
                out[name] = cache["emm"][0 if name == "emm" else 1]
            elif name == "diagnostics":
                out[name] = table_diagnostics(an)
            elif name == "pubbias":
                out[name] = table_pubbias(an)
        except MetakitError as e:
            failures.append((f"table:{name}", e))
    return out


# ---- plots -------------------------------------------------------------------

_SPEC_KEYS = ("width", "height", "decimals", "title", "xlab", "ylab", "color_var", "shape_var", "label_var",
              "panel_widths")


def _plot_spec(opts):
    kw = {k: opts[k] for k in _SPEC_KEYS if k in opts}
    if "panel_widths" in kw:
        kw["panel_widths"] = tuple(kw["panel_widths"])
    return PlotSpec(**kw)


def _col(d, name):
    if name is None:
        return None
    vals = d[name]
    if d.types[name] == REAL:
        return [None if np.isnan(x) else fmt_real(x) for x in vals]
    return [None if x is None else str(x) for x in vals]


def fmt_real(x):
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def render_plots(an: Analysis, which=None):
    """``name -> SVG text`` for the configured plots."""
    plots = an.cfg.get("outputs", {}).get("plots", {})
    out = {}
    d = an.data
    fit = an.fit
    for name, opts in plots.items():
        if which is not None and name not in which:
            continue
        spec = _plot_spec(opts)
        labels = _col(d, spec.label_var)
        if name == "funnel":
            out[name] = funnel_svg(fit.y, np.sqrt(fit.v), fit, opts.get("center", "H0_zero"),
                                   tuple(opts.get("levels", (0.90, 0.95, 0.99))),
                                   opts.get("heterogeneity_widened", False), labels, _col(d, spec.color_var),
                                   _col(d, spec.shape_var), spec)
        elif name == "forest":
            info = {c: _col(d, c) for c in opts.get("study_info", [])}
            agg = opts.get("aggregation")
            if agg is not None and agg not in d:
                raise SchemaError(f"aggregation column {agg!r} not found")
            r = pooled_row(an)
            emm_rows = None
            if opts.get("emm_rows", False):
                emm_rows = []
                for term in an.cfg.get("outputs", {}).get("emm", {}).get("terms", []):
                    kinds = fit.design.kinds
                    if all(kinds.get(v) == CATEGORICAL for v in parse_term(term)):
                        emm_rows += emm(fit, term, robust=an.robust)
            sg_labels = _col(d, an.cfg.model["subgroup"]) if an.subgroup is not None else None
            out[name] = forest_svg(
                fit, labels=labels, study_info=info, emm_rows=emm_rows,
                model_info=tuple(opts.get("model_info", ("tau2", "I2", "Q", "test"))),
                aggregation=_col(d, agg), predicted=opts.get("predicted", False), subgroup=an.subgroup,
                subgroup_labels=sg_labels, prediction=opts.get("prediction_interval", True),
                transform=an.transform, reference_lines=tuple(opts.get("reference_lines", (0.0,))),
                pooled=(r["estimate"], r["ci_lower"], r["ci_upper"], r["pi_lower"], r["pi_upper"]), spec=spec)
        elif name == "bubble":
            out[name] = bubble_svg(fit, opts["focal"], opts.get("separate_lines"), opts.get("separate_plots"),
                                   tuple(opts.get("bands", ("ci", "pi"))), an.robust, spec)
    return out
