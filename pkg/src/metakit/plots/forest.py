"""Forest plot."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats

from ..errors import SchemaError
from ..uni.estimators import Interval
from ..uni.model import pooled_estimate, prediction_interval
from .svg import FONT_SIZE, Canvas, PlotSpec, Scale, nice_ticks, padded_range, text_width

ROW_H = 20
MODEL_INFO = ("tau2", "I2", "Q", "test")
_TRANSFORMS = {"none": lambda x: x, "exp": np.exp, "tanh": np.tanh}


def _aggregate(y, v, groups):
    levels = sorted({str(g) for g in groups}, key=lambda s: s.encode("utf-8"))
    g = np.array([str(x) for x in groups], dtype=object)
    ya, va = [], []
    for lv in levels:
        m = g == lv
        w = 1 / v[m]
        ya.append(float(np.sum(w * y[m]) / np.sum(w)))
        va.append(float(1 / np.sum(w)))
    return levels, np.array(ya), np.array(va)


def forest_svg(fit, labels=None, study_info=None, emm_rows=None, model_info=MODEL_INFO, aggregation=None,
               predicted=False, subgroup=None, subgroup_labels=None, prediction=True, transform="none",
               reference_lines=(0.0,), pooled=None, spec=PlotSpec()):
    """One row per study (or per aggregated group) with weight-scaled squares and
    CI whiskers, a pooled diamond and an optional prediction-interval bar.

    ``study_info`` maps column titles to per-study values shown on the left.
    ``subgroup`` is a :class:`~metakit.uni.subgroup.SubgroupResult` and
    ``subgroup_labels`` the per-row group labels used to stratify rows.
    ``transform`` changes tick labels and numerals, not positions.
    ``pooled`` overrides the diamond and PI bar with
    ``(estimate, ci_lower, ci_upper, pi_lower, pi_upper)``, e.g. a
    marginal mean of a meta-regression or a cluster-robust estimate.
    """
    if transform not in _TRANSFORMS:
        raise SchemaError(f"unknown transform {transform!r}")
    tf = _TRANSFORMS[transform]
    y, v = np.asarray(fit.y, float), np.asarray(fit.v, float)
    k = len(y)
    labels = [f"Study {i + 1}" for i in range(k)] if labels is None else [str(s) for s in labels]
    info = dict(study_info or {})
    for name, vals in info.items():
        if len(vals) != k:
            raise SchemaError(f"study information column {name!r} has {len(vals)} values, expected {k}")
    level = getattr(getattr(fit, "spec", None), "ci_level", getattr(fit, "ci_level", 0.95))
    zq = stats.norm.ppf(0.5 + level / 2)
    tau2_rows = fit.row_tau2()
    if aggregation is not None:
        if len(aggregation) != k:
            raise SchemaError("aggregation column length does not match the data")
        labels, y, v = _aggregate(y, v, aggregation)
        info = {}
        tau2_rows = np.full(len(y), fit.tau2)
    w = 1 / (v + tau2_rows)
    weights = 100 * w / w.sum()

    # row plan: ("study", i) | ("header", label) | ("diamond", label, est, lo, hi) | ("pi", lo, hi) | ("emm", row)
    plan = []
    if subgroup is not None and aggregation is None:
        if subgroup_labels is None or len(subgroup_labels) != k:
            raise SchemaError("subgroup mode needs per-row group labels")
        gl = np.array([str(s) for s in subgroup_labels], dtype=object)
        for g, gf in subgroup.fits.items():
            plan.append(("header", str(g)))
            plan += [("study", i) for i in np.flatnonzero(gl == str(g))]
            est, se, ci = pooled_estimate(gf)
            plan.append(("diamond", f"{g} (k={gf.k})", est, ci.lower, ci.upper))
        for g in subgroup.excluded:
            plan.append(("header", f"{g}: not estimated"))
            plan += [("study", i) for i in np.flatnonzero(gl == str(g))]
    else:
        plan += [("study", i) for i in range(len(y))]
    if pooled is None:
        est, se, ci = pooled_estimate(fit)
        pi = prediction_interval(fit)
    else:
        est, ci, pi = pooled[0], Interval(pooled[1], pooled[2]), Interval(pooled[3], pooled[4])
    plan.append(("diamond", "RE Model" if fit.tau2 > 0 or fit.method != "FE" else "FE Model", est, ci.lower,
                 ci.upper))
    if prediction:
        plan.append(("pi", pi.lower, pi.upper))
    for r in emm_rows or []:
        plan.append(("emm", r))

    lo_all = [y - zq * np.sqrt(v), [ci.lower]]
    hi_all = [y + zq * np.sqrt(v), [ci.upper]]
    if prediction:
        lo_all.append([pi.lower])
        hi_all.append([pi.upper])
    for p_ in plan:
        if p_[0] == "diamond":
            lo_all.append([p_[3]])
            hi_all.append([p_[4]])
        if p_[0] == "emm":
            lo_all.append([p_[1].ci_lower])
            hi_all.append([p_[1].ci_upper])
    xlo, xhi = padded_range(np.concatenate([np.ravel(a) for a in lo_all + hi_all]), 0.04)

    def num(x):
        return spec.fmt(tf(x))

    def est_text(e, a, b):
        return f"{num(e)} [{num(a)}, {num(b)}]"

    right_texts = [est_text(y[i], y[i] - zq * math.sqrt(v[i]), y[i] + zq * math.sqrt(v[i])) for i in range(len(y))]
    left_cols = [("Study", labels)] + [(n, [str(x) for x in vals]) for n, vals in info.items()]
    col_w = [max(text_width(t) for t in [n] + list(vals)) + 12 for n, vals in left_cols]
    left_auto = sum(col_w) + 10
    right_auto = max(text_width(t) for t in right_texts + [est_text(est, ci.lower, ci.upper)]) + 60
    W = spec.width
    panels = spec.panels()
    if panels is None:
        mid = max(W - left_auto - right_auto, 0.3 * W)
        scale_ = (W - mid) / max(left_auto + right_auto, 1.0)
        left_w, right_w = left_auto * scale_, right_auto * scale_
    else:
        left_w, mid, right_w = (p * W for p in panels)
    top = 40 if spec.title else 28
    info_lines = [s for s in model_info if s in MODEL_INFO]
    H = max(spec.height, top + ROW_H * (len(plan) + 2) + 30 + 14 * len(info_lines))
    cv = Canvas(W, H, spec.title or "Forest plot")
    if spec.title:
        cv.text(W / 2, 18, spec.title, "middle", weight="bold")
    sx = Scale(xlo, xhi, left_w + 10, left_w + mid - 10)
    x0 = 6
    for (name, _), cw in zip(left_cols, col_w):
        cv.text(x0, top, name, weight="bold", cls="header")
        x0 += cw
    cv.text(W - 6, top, "Estimate [CI]" + ("  Weight" if aggregation is None else ""), "end", weight="bold",
            cls="header")
    smax = ROW_H * 0.42
    wmax = float(weights.max())
    row_y = top + ROW_H
    for p_ in plan:
        yy = row_y + ROW_H / 2
        if p_[0] == "header":
            cv.text(6, yy + 4, p_[1], weight="bold", cls="group-header")
        elif p_[0] == "study":
            i = p_[1]
            a, b = y[i] - zq * math.sqrt(v[i]), y[i] + zq * math.sqrt(v[i])
            cv.line(sx(a), yy, sx(b), yy, cls="whisker")
            half = smax * math.sqrt(weights[i] / wmax)
            cv.rect(sx(y[i]) - half, yy - half, 2 * half, 2 * half, "#000000", "marker")
            x0 = 6
            for (name, vals), cw in zip(left_cols, col_w):
                cv.text(x0, yy + 4, vals[i], cls="study-info")
                x0 += cw
            txt = right_texts[i] + (f"  {weights[i]:.{spec.decimals}f}%" if aggregation is None else "")
            cv.text(W - 6, yy + 4, txt, "end", cls="estimate")
            if predicted and aggregation is None:
                fv = float(fit.X[i] @ fit.b)
                cv.polygon([(sx(fv), yy - 3), (sx(fv) + 3, yy), (sx(fv), yy + 3), (sx(fv) - 3, yy)], "#888888",
                           "fitted")
        elif p_[0] == "diamond":
            _, lab, e, a, b = p_
            cv.polygon([(sx(a), yy), (sx(e), yy - 6), (sx(b), yy), (sx(e), yy + 6)], "#000000", "diamond")
            cv.text(6, yy + 4, lab, weight="bold", cls="pooled-label")
            cv.text(W - 6, yy + 4, est_text(e, a, b), "end", cls="estimate")
        elif p_[0] == "pi":
            _, a, b = p_
            cv.rect(sx(a), yy - 2, sx(b) - sx(a), 4, "#777777", "pi-bar")
            cv.text(6, yy + 4, "Prediction interval", cls="pooled-label")
            cv.text(W - 6, yy + 4, f"[{num(a)}, {num(b)}]", "end", cls="estimate")
        else:
            r = p_[1]
            cv.polygon([(sx(r.ci_lower), yy), (sx(r.estimate), yy - 5), (sx(r.ci_upper), yy),
                        (sx(r.estimate), yy + 5)], "#555555", "emm-diamond")
            cv.text(6, yy + 4, f"EMM: {r.level}" if not isinstance(r.level, float) else f"EMM: {num(r.level)}",
                    cls="pooled-label")
            cv.text(W - 6, yy + 4, est_text(r.estimate, r.ci_lower, r.ci_upper), "end", cls="estimate")
        row_y += ROW_H
    axis_y = row_y + 6
    for rl in reference_lines:
        if xlo <= rl <= xhi:
            cv.line(sx(rl), top + ROW_H, sx(rl), axis_y, "#999999", 1, "reference-line", dash="3,3")
    cv.line(sx(xlo), axis_y, sx(xhi), axis_y, cls="axis")
    for t in nice_ticks(xlo, xhi):
        cv.line(sx(t), axis_y, sx(t), axis_y + 4)
        cv.text(sx(t), axis_y + 16, num(t), "middle", cls="tick")
    if spec.xlab:
        cv.text(sx((xlo + xhi) / 2), axis_y + 30, spec.xlab, "middle")
    yinfo = axis_y + 46
    for key in info_lines:
        s = _info_line(fit, key, spec)
        if s:
            cv.text(6, yinfo, s, size=FONT_SIZE - 1, cls="model-info")
            yinfo += 14
    return cv.render()


def _info_line(fit, key, spec):
    f = spec.fmt
    if key == "tau2":
        return f"tau2 = {f(fit.tau2)}"
    if key == "I2":
        i2 = getattr(fit, "I2", math.nan)
        return f"I2 = {f(i2)}%" if np.isfinite(i2) else ""
    if key == "Q":
        if not np.isfinite(fit.QE):
            return ""
        return f"Q({fit.QE_df}) = {f(fit.QE)}, p = {_p(fit.QEp, spec.decimals)}"
    if key == "test":
        stat, p = fit.stat_p(float(fit.b[0]), float(fit.se[0]))
        lab = f"t({f(fit.ddf)})" if fit.ddf is not None else "z"
        return f"Test of the pooled effect: {lab} = {f(stat)}, p = {_p(p, spec.decimals)}"
    return ""


def _p(p, decimals):
    d = max(decimals, 3)
    return f"< {10.0 ** -d:.{d}f}" if p < 10.0 ** -d else f"{p:.{d}f}"
