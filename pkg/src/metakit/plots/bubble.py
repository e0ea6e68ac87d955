"""Bubble plot for meta-regression."""

from __future__ import annotations

import math

import numpy as np

from ..errors import SchemaError
from ..ingest import CATEGORICAL
from ..postfit.diagnostics import predict_effects
from ..postfit.emm import _location, _scale, reference_vector
from .svg import (JITTER_SEED, PALETTE, Canvas, PlotSpec, Scale, draw_legend, group_styles, nice_ticks,
                  padded_range)

N_GRID = 101
BANDS = ("ci", "pi")


def _levels(info, data, var):
    if var is None:
        return [None]
    if var not in data:
        raise SchemaError(f"unknown column {var!r}")
    if info is not None and var in info.levels:
        return list(info.levels[var])
    return sorted({str(x) for x in data[var] if x is not None}, key=lambda s: s.encode("utf-8"))


def _trend(fit, inf, sinf, fixed_list):
    """Predictions for a list of ``fixed`` dicts (non-focal terms averaged)."""
    C = np.array([reference_vector(inf, fx) for fx in fixed_list])
    Z = None
    if sinf is not None:
        Z = np.array([reference_vector(sinf, {k: v for k, v in fx.items() if k in sinf.info.kinds})
                      for fx in fixed_list])
    df = inf.df_of(C[0])
    return predict_effects(fit, C, scale_rows=Z, level=inf.level, cov=inf.cov, df=df)


def bubble_svg(fit, focal, separate_lines=None, separate_plots=None, bands=BANDS, robust=None, spec=PlotSpec()):
    """Observed effects against a moderator with bubble area proportional to
    the model weight, plus the estimated trend with CI and PI bands.

    Non-focal terms are averaged as for weighted marginal means. A
    categorical ``focal`` gives jittered bubbles (fixed seed) and an interval
    glyph per level instead of a trend line.
    """
    data = getattr(fit, "data", None)
    info = getattr(fit, "design", None)
    if data is None or info is None:
        raise SchemaError("bubble plot needs a model fitted from a dataset with moderators")
    if focal not in info.kinds:
        raise SchemaError(f"focal variable {focal!r} is not in the model")
    for b in bands:
        if b not in BANDS:
            raise SchemaError(f"unknown band {b!r}; expected ci or pi")
    for var in (separate_lines, separate_plots):
        if var is not None and var not in info.kinds:
            raise SchemaError(f"{var!r} is not a model variable")
        if var is not None and info.kinds[var] != CATEGORICAL:
            raise SchemaError(f"{var!r} must be categorical to separate lines or plots")
    inf = _location(fit, robust)
    sinf = _scale(fit) if getattr(fit, "scale", None) is not None else None
    y = np.asarray(fit.y, float)
    w = 1.0 / (np.asarray(fit.v, float) + fit.row_tau2())
    categorical = info.kinds[focal] == CATEGORICAL
    line_lv = _levels(info, data, separate_lines)
    plot_lv = _levels(info, data, separate_plots)
    line_col = np.array([str(x) for x in data[separate_lines]], dtype=object) if separate_lines else None
    plot_col = np.array([str(x) for x in data[separate_plots]], dtype=object) if separate_plots else None
    _, cmap = group_styles(line_lv if separate_lines else None, PALETTE)

    if categorical:
        fl = list(info.levels[focal])
        fcol = [str(x) for x in data[focal]]
        rng = np.random.default_rng(JITTER_SEED)
        xs = np.array([fl.index(s) for s in fcol], float) + rng.uniform(-0.2, 0.2, len(fcol))
        xlo, xhi = -0.6, len(fl) - 0.4
    else:
        xs = np.asarray(data.real(focal), float)
        xlo, xhi = padded_range(xs, 0.04)
        grid = np.linspace(xs.min(), xs.max(), N_GRID)

    # predictions per (panel, line)
    preds = {}
    for pl in plot_lv:
        for ll in line_lv:
            base = {}
            if separate_plots:
                base[separate_plots] = pl
            if separate_lines:
                base[separate_lines] = ll
            pts = fl if categorical else list(grid)
            preds[pl, ll] = _trend(fit, inf, sinf, [{**base, focal: x} for x in pts])
    yvals = [y]
    for pr in preds.values():
        yvals += [pr.ci_lower, pr.ci_upper] + ([pr.pi_lower, pr.pi_upper] if "pi" in bands else [])
    ylo, yhi = padded_range(np.concatenate(yvals), 0.05)

    W, H = spec.width, spec.height
    n_pan = len(plot_lv)
    left, right, top, bottom = 64, 20 + (120 if separate_lines else 0), 36 + (16 if separate_plots else 0), 48
    pan_w = (W - left - right - 30 * (n_pan - 1)) / n_pan
    cv = Canvas(W, H, spec.title or "Bubble plot")
    if spec.title:
        cv.text(W / 2, 20, spec.title, "middle", weight="bold")
    sy = Scale(ylo, yhi, H - bottom, top)
    rmax = 12.0
    wmax = float(w.max())
    for j, pl in enumerate(plot_lv):
        x0 = left + j * (pan_w + 30)
        sx = Scale(xlo, xhi, x0, x0 + pan_w)
        if separate_plots:
            cv.text(x0 + pan_w / 2, top - 8, f"{separate_plots} = {pl}", "middle", cls="panel-title")
        cv.line(x0, H - bottom, x0 + pan_w, H - bottom, cls="axis")
        cv.line(x0, top, x0, H - bottom, cls="axis")
        if categorical:
            for i, lv in enumerate(fl):
                cv.line(sx(i), H - bottom, sx(i), H - bottom + 4)
                cv.text(sx(i), H - bottom + 17, lv, "middle", cls="tick")
        else:
            for t in nice_ticks(xlo, xhi):
                cv.line(sx(t), H - bottom, sx(t), H - bottom + 4)
                cv.text(sx(t), H - bottom + 17, spec.fmt(t), "middle", cls="tick")
        if j == 0:
            for t in nice_ticks(ylo, yhi):
                cv.line(x0 - 4, sy(t), x0, sy(t))
                cv.text(x0 - 7, sy(t) + 4, spec.fmt(t), "end", cls="tick")
        for ll in line_lv:
            pr = preds[pl, ll]
            color = cmap.get(ll, "#000000") if separate_lines else "#000000"
            if categorical:
                for i in range(len(fl)):
                    off = (line_lv.index(ll) - (len(line_lv) - 1) / 2) * 0.12
                    xi = sx(i + off)
                    if "pi" in bands:
                        cv.line(xi, sy(pr.pi_lower[i]), xi, sy(pr.pi_upper[i]), color, 1, "pi-glyph", dash="3,2")
                    if "ci" in bands:
                        cv.line(xi, sy(pr.ci_lower[i]), xi, sy(pr.ci_upper[i]), color, 3, "ci-glyph")
                    cv.marker("diamond", xi, sy(pr.pred[i]), 5, color, "trend-point")
                continue
            gx = sx(grid)
            if "pi" in bands:
                pts = list(zip(gx, sy(pr.pi_upper))) + list(zip(gx[::-1], sy(pr.pi_lower[::-1])))
                cv.polygon(pts, color, "pi-band", opacity=0.12)
            if "ci" in bands:
                pts = list(zip(gx, sy(pr.ci_upper))) + list(zip(gx[::-1], sy(pr.ci_lower[::-1])))
                cv.polygon(pts, color, "ci-band", opacity=0.3)
            cv.polyline(list(zip(gx, sy(pr.pred))), color, 2, "trend-line")
        keep = np.ones(len(y), bool) if plot_col is None else plot_col == pl
        for i in np.flatnonzero(keep):
            color = cmap.get(line_col[i], "#000000") if separate_lines else "#000000"
            r = rmax * math.sqrt(w[i] / wmax)
            cv.circle(sx(xs[i]), sy(y[i]), r, color, "marker", opacity=0.5, stroke=color)
    cv.text(left + (W - left - right) / 2, H - 10, spec.xlab or focal, "middle")
    cv.text(16, (top + H - bottom) / 2, spec.ylab or "Effect Size", "middle", rotate=-90)
    if separate_lines:
        draw_legend(cv, W - right + 12, top + 10, list(cmap.items()), "color")
    return cv.render()
