"""Reference-implementation (metafor) script for a run configuration."""

from __future__ import annotations

from ..kernel import parse_term

_MEASURE = {"logRR": "RR", "logOR": "OR", "RD": "RD", "SMD": "SMD", "ZCOR": "ZCOR"}
_ARGS = {
    "a": "ai", "b": "bi", "c": "ci", "d": "di",
    "m1": "m1i", "m2": "m2i", "sd1": "sd1i", "sd2": "sd2i", "n1": "n1i", "n2": "n2i",
    "r": "ri", "n": "ni",
}
_TEST = {"knapp_hartung": "knha", "wald_z": "z", "t": "t"}
_FN = {"sqrt": "sqrt", "square": "(function(x) x^2)", "log": "log", "exp": "exp"}


def _q(s):
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _vec(values):
    return "c(" + ", ".join(_q(v) if isinstance(v, str) else repr(v) for v in values) + ")"


def _formula(terms):
    return "~ " + " + ".join(":".join(parse_term(t)) for t in terms) if terms else "~ 1"


def emit_r_code(cfg) -> str:
    """Build a metafor script equivalent to ``cfg``; gaps become comment lines."""
    L = ["# generated by metakit emit-r-code", "library(metafor)"]
    m = cfg.model
    gaps = []
    data = cfg["data"]
    L.append(f"dat <- read.csv({_q(data)}, stringsAsFactors = FALSE)" if not data.startswith("builtin:")
             else "dat <- dat.bcg  # bundled BCG data")
    if "subset" in cfg:
        s = cfg["subset"]
        L.append(f"dat <- dat[!is.na(dat${s['column']}) & dat${s['column']} %in% {_vec(s['values'])}, ]")
    for t in cfg.get("transforms", []):
        L.append(f"dat${t['target']} <- {_FN[t['function']]}(dat${t['source']})")
    es = cfg["effect_size"]
    if "compute" in es:
        for i, step in enumerate(es["compute"]):
            args = ", ".join(f"{_ARGS[k]} = {v}" for k, v in step["columns"].items())
            meas = _MEASURE[step["measure"]]
            if step["measure"] == "SMD" and step.get("exact_j"):
                gaps.append("exact small-sample correction requested; metafor's SMD default may differ")
            if i == 0 and "subset" not in step:
                L.append(f"dat <- escalc(measure = {_q(meas)}, {args}, data = dat)")
            else:
                sel = "rep(TRUE, nrow(dat))"
                if "subset" in step:
                    sel = f"dat${step['subset']['column']} %in% {_vec(step['subset']['values'])}"
                L.append(f"sel <- {sel}" + (" & is.na(dat$yi)" if i > 0 else ""))
                L.append(f"tmp <- escalc(measure = {_q(meas)}, {args}, data = dat[sel, ])")
                if i == 0:
                    L.append("dat$yi <- NA_real_; dat$vi <- NA_real_")
                L.append("dat$yi[sel] <- tmp$yi; dat$vi[sel] <- tmp$vi")
    else:
        c = es["columns"]
        L.append(f"dat$yi <- dat${c['yi']}")
        L.append(f"dat$vi <- dat${c['vi']}" if "vi" in c else f"dat$vi <- dat${c['sei']}^2")
    method = m.get("method", "REML")
    level = m.get("ci_level", 0.95)
    lvl = "" if level == 0.95 else f", level = {round(level * 100, 10)}"
    mods = m.get("moderators", [])
    mods_arg = f", mods = {_formula(mods)}" if mods else ""
    if not m.get("intercept", True):
        mods_arg = f", mods = {_formula(mods)} - 1"
    if cfg.is_multilevel:
        test = _TEST[m.get("test", "t")]
        if m.get("test") == "knapp_hartung":
            gaps.append("knapp_hartung residual rescaling has no rma.mv equivalent; test = 't' used")
            test = "t"
        r = m["random"]
        rnd = f"~ 1 | {r['level1']}" + (f"/{r['level2']}" if "level2" in r else "")
        if "vcalc" in m:
            vc = m["vcalc"]
            extra = ""
            if "construct" in vc:
                extra += f", obs = {vc['construct']}"
            if "construct_type" in vc:
                extra += f", type = {vc['construct_type']}"
            rho = vc.get("rho_within_type", 0.0)
            if "construct_type" in vc:
                rho = f"c({vc.get('rho_within_type', 0.0)!r}, {vc.get('rho_between_type', 0.0)!r})"
            L.append(f"V <- vcalc(vi, cluster = {vc['cluster']}{extra}, rho = {rho}, data = dat)")
        elif "V_file" in m:
            L.append(f"V <- as.matrix(read.csv({_q(m['V_file'])}, header = FALSE))")
        else:
            L.append("V <- dat$vi")
        L.append(f"res <- rma.mv(yi, V{mods_arg}, random = {rnd}, data = dat, method = {_q(method)}, "
                 f"test = {_q(test)}{lvl})")
    else:
        test = _TEST[m.get("test", "knapp_hartung")]
        fixed = f", tau2 = {m['fixed_tau2']!r}" if "fixed_tau2" in m else ""
        scale = f", scale = {_formula(m['scale'])}" if m.get("scale") else ""
        if scale and test == "knha":
            gaps.append("location-scale t tests here use k - p df without residual rescaling")
            test = "t"
        L.append(f"res <- rma(yi, vi{mods_arg}{scale}, data = dat, method = {_q(method)}, test = {_q(test)}"
                 f"{fixed}{lvl})")
        if m.get("truncate_kh"):
            gaps.append("truncated Knapp-Hartung: metafor needs test = 'adhoc'")
        if "subgroup" in m:
            g = m["subgroup"]
            L.append(f"fits <- lapply(split(dat, dat${g}), function(d) rma(yi, vi, data = d, "
                     f"method = {_q(method)}, test = {_q(test)}{lvl}))")
            L.append("sub <- rma(sapply(fits, coef), sei = sapply(fits, function(f) f$se), method = \"FE\")")
            L.append("sub$QE; sub$QEp  # subgroup differences")
        for pm in m.get("pooled_2x2", []):
            step = es["compute"][0]
            args = ", ".join(f"{_ARGS[k]} = {v}" for k, v in step["columns"].items())
            if pm == "MH":
                L.append(f"rma.mh({args}, measure = {_q(_MEASURE[step['measure']])}, data = dat)")
            else:
                L.append(f"rma.peto({args}, data = dat)")
    if "clustering" in cfg:
        cl = cfg["clustering"]
        typ = cl.get("type", "CR2")
        if typ == "CR2":
            L.append(f"res_rob <- robust(res, cluster = {cl['column']}, clubSandwich = TRUE)")
        else:
            L.append(f"res_rob <- robust(res, cluster = {cl['column']}, adjust = {'TRUE' if typ == 'CR1' else 'FALSE'})")
            gaps.append(f"{typ} here uses Satterthwaite df; metafor's non-clubSandwich robust() uses "
                        "the number of clusters minus p")
        L.append("res_rob")
    else:
        L.append("res")
    out = cfg.get("outputs", {})
    pb = out.get("pubbias")
    if pb is not None:
        if pb.get("egger", True):
            L.append("regtest(res, model = \"rma\", predictor = \"sei\")")
        if pb.get("begg", True):
            L.append("ranktest(res)")
            gaps.append("rank test p: exact for k <= 12 here; metafor is exact for k < 50")
        tf = pb.get("trim_and_fill", "L0")
        if tf != "none":
            L.append(f"trimfill(res, estimator = {_q(tf)})")
            gaps.append("trim-and-fill iterations here use fixed-effect fits")
        for f in pb.get("failsafe", ["Rosenthal"]):
            L.append(f"fsn(yi, vi, data = dat, type = {_q(f)})")
    if "emm" in out:
        e = out["emm"]
        terms = [t for t in e.get("terms", []) if t]
        for t in terms:
            L.append(f"emmeans::emmeans(emmprep(res), specs = {_q(t)}, "
                     f"weights = {_q('proportional' if e.get('weighting', 'weighted') == 'weighted' else 'equal')})")
    if "diagnostics" in out.get("tables", []):
        L.append("influence(res)")
    for g in gaps:
        L.append(f"# not reproduced exactly: {g}")
    return "\n".join(L) + "\n"
