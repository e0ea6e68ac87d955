"""Funnel plot."""

from __future__ import annotations

import numpy as np
from scipy import stats

from ..errors import InsufficientDataError, SchemaError
from .svg import (PALETTE, SHAPES, Canvas, PlotSpec, Scale, draw_legend, group_styles, nice_ticks,
                  padded_range)

CENTERS = ("H0_zero", "H1_estimate")


def funnel_svg(y, sei, fit=None, center="H0_zero", levels=(0.90, 0.95, 0.99), heterogeneity_widened=False,
               labels=None, colors=None, shapes=None, spec=PlotSpec()):
    """Effect sizes against standard errors (0 at the top) with pseudo-confidence
    regions ``center +/- q * sei`` (or ``q * sqrt(sei^2 + tau2)`` when widened)."""
    y = np.asarray(y, dtype=float)
    sei = np.asarray(sei, dtype=float)
    if len(y) == 0:
        raise InsufficientDataError("empty funnel plot: no studies")
    if np.any(~(sei > 0)):
        raise SchemaError("funnel plot needs sei > 0 for every study")
    if center not in CENTERS:
        raise SchemaError(f"unknown funnel center {center!r}")
    if center == "H1_estimate" and fit is None:
        raise SchemaError("a fitted model is needed to center the funnel at the estimate")
    levels = sorted(levels)
    for lv in levels:
        if lv not in (0.90, 0.95, 0.99):
            raise SchemaError(f"funnel level {lv} not in {{0.90, 0.95, 0.99}}")
    mu = float(fit.b[0]) if center == "H1_estimate" else 0.0
    tau2 = float(fit.tau2) if (heterogeneity_widened and fit is not None) else 0.0
    se_max = float(sei.max()) * 1.05
    qmax = stats.norm.ppf(0.5 + max(levels) / 2) if levels else 1.96
    half = qmax * np.sqrt(se_max**2 + tau2)
    xlo, xhi = padded_range(np.concatenate([y, [mu - half, mu + half]]), 0.02)

    W, H = spec.width, spec.height
    left, right, top, bottom = 64, 20 + (130 if colors is not None or shapes is not None else 0), 36, 48
    sx = Scale(xlo, xhi, left, W - right)
    sy = Scale(0.0, se_max, top, H - bottom)
    cv = Canvas(W, H, spec.title or "Funnel plot")
    if spec.title:
        cv.text(W / 2, 20, spec.title, "middle", weight="bold")

    grid = np.linspace(0.0, se_max, 41)
    shades = ["#e8e8e8", "#d0d0d0", "#b8b8b8"]
    for i, lv in enumerate(reversed(levels)):
        q = stats.norm.ppf(0.5 + lv / 2)
        h = q * np.sqrt(grid**2 + tau2)
        pts = [(sx(mu - a), sy(s)) for a, s in zip(h, grid)] + [(sx(mu + a), sy(s)) for a, s in zip(h[::-1], grid[::-1])]
        cv.polygon(pts, shades[i % len(shades)], f"funnel-region level-{int(round(lv * 100))}")
    for lv in levels:
        q = stats.norm.ppf(0.5 + lv / 2)
        h = q * np.sqrt(grid**2 + tau2)
        for sgn in (-1, 1):
            cv.polyline([(sx(mu + sgn * a), sy(s)) for a, s in zip(h, grid)], "#777777", 1,
                        f"funnel-line level-{int(round(lv * 100))}", dash="4,3")
    cv.line(sx(mu), sy(0), sx(mu), sy(se_max), "#000000", 1, "center-line")

    # axes
    cv.line(left, H - bottom, W - right, H - bottom, cls="axis")
    cv.line(left, top, left, H - bottom, cls="axis")
    for t in nice_ticks(xlo, xhi):
        cv.line(sx(t), H - bottom, sx(t), H - bottom + 4)
        cv.text(sx(t), H - bottom + 17, spec.fmt(t), "middle", cls="tick")
    for t in nice_ticks(0.0, se_max):
        cv.line(left - 4, sy(t), left, sy(t))
        cv.text(left - 7, sy(t) + 4, spec.fmt(t), "end", cls="tick")
    cv.text((left + W - right) / 2, H - 10, spec.xlab or "Effect Size", "middle")
    cv.text(16, (top + H - bottom) / 2, spec.ylab or "Standard Error", "middle", rotate=-90)

    col, cmap = group_styles(colors, PALETTE)
    shp, smap = group_styles(shapes, SHAPES)
    for i in range(len(y)):
        fill = cmap[col[i]] if col is not None and col[i] is not None else "#000000"
        shape = smap[shp[i]] if shp is not None and shp[i] is not None else "circle"
        cv.marker(shape, sx(y[i]), sy(sei[i]), 4, fill)
        if labels is not None:
            cv.text(sx(y[i]) + 6, sy(sei[i]) - 5, labels[i], size=9, cls="label")
    lx = W - right + 12
    if cmap:
        draw_legend(cv, lx, top + 10, list(cmap.items()), "color")
    if smap:
        draw_legend(cv, lx, top + 20 + 16 * len(cmap), list(smap.items()), "shape")
    return cv.render()
