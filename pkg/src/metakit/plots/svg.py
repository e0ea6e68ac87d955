"""Minimal deterministic SVG writer and shared plot settings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from ..errors import SchemaError

FONT = "sans-serif"
FONT_SIZE = 12
# jitter for categorical bubble plots is drawn from this fixed seed
JITTER_SEED = 0x1A5B
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")
SHAPES = ("circle", "square", "triangle", "diamond")

# average advance width in units of the font size, for auto panel widths
_CHAR_WIDTH = {**{c: 0.556 for c in "0123456789"}, ".": 0.278, ",": 0.278, "-": 0.333, " ": 0.278,
               "[": 0.278, "]": 0.278, "(": 0.333, ")": 0.333, "%": 0.889, "=": 0.584, ":": 0.278,
               "i": 0.222, "l": 0.222, "j": 0.222, "t": 0.278, "f": 0.278, "r": 0.333, "I": 0.278,
               "m": 0.833, "w": 0.722, "M": 0.833, "W": 0.944}


def text_width(s, size=FONT_SIZE):
    return sum(_CHAR_WIDTH.get(c, 0.6 if c.isupper() else 0.5) for c in str(s)) * size


@dataclass(frozen=True)
class PlotSpec:
    width: int = 640
    height: int = 480
    decimals: int = 2
    title: str = ""
    xlab: str = ""
    ylab: str = ""
    color_var: str | None = None
    shape_var: str | None = None
    label_var: str | None = None
    panel_widths: tuple | None = None   # (left, middle, right); None = automatic

    def __post_init__(self):
        if self.width < 100 or self.height < 100:
            raise SchemaError("plot width and height must be at least 100 px")
        if self.decimals < 0:
            raise SchemaError("decimals must be nonnegative")
        if self.panel_widths is not None:
            if len(self.panel_widths) != 3 or any(not w > 0 for w in self.panel_widths):
                raise SchemaError("panel_widths must be three positive numbers")

    def panels(self):
        if self.panel_widths is None:
            return None
        s = float(sum(self.panel_widths))
        return tuple(w / s for w in self.panel_widths)

    def fmt(self, x):
        return fmt_num(x, self.decimals)


def fmt_num(x, decimals):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return "NA"
    s = f"{float(x):.{decimals}f}"
    if s.startswith("-") and float(s) == 0:
        s = s[1:]
    return s


def c(x):
    """Coordinate formatting: two decimals, no negative zero."""
    return fmt_num(x, 2)


class Canvas:
    def __init__(self, width, height, title=""):
        self.width, self.height = int(width), int(height)
        self.parts = []
        self.title = title

    def add(self, s):
        self.parts.append(s)

    def line(self, x1, y1, x2, y2, stroke="#000000", width=1, cls=None, dash=None):
        extra = f' class="{cls}"' if cls else ""
        extra += f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{c(x1)}" y1="{c(y1)}" x2="{c(x2)}" y2="{c(y2)}" stroke="{stroke}" '
                 f'stroke-width="{width}"{extra}/>')

    def rect(self, x, y, w, h, fill="#000000", cls=None, stroke="none", opacity=None):
        extra = f' class="{cls}"' if cls else ""
        extra += f' fill-opacity="{opacity}"' if opacity is not None else ""
        self.add(f'<rect x="{c(x)}" y="{c(y)}" width="{c(w)}" height="{c(h)}" fill="{fill}" '
                 f'stroke="{stroke}"{extra}/>')

    def circle(self, x, y, r, fill="#000000", cls=None, opacity=None, stroke="none"):
        extra = f' class="{cls}"' if cls else ""
        extra += f' fill-opacity="{opacity}"' if opacity is not None else ""
        self.add(f'<circle cx="{c(x)}" cy="{c(y)}" r="{c(r)}" fill="{fill}" stroke="{stroke}"{extra}/>')

    def polygon(self, pts, fill="#000000", cls=None, opacity=None, stroke="none"):
        extra = f' class="{cls}"' if cls else ""
        extra += f' fill-opacity="{opacity}"' if opacity is not None else ""
        p = " ".join(f"{c(x)},{c(y)}" for x, y in pts)
        self.add(f'<polygon points="{p}" fill="{fill}" stroke="{stroke}"{extra}/>')

    def polyline(self, pts, stroke="#000000", width=1, cls=None, dash=None):
        extra = f' class="{cls}"' if cls else ""
        extra += f' stroke-dasharray="{dash}"' if dash else ""
        p = " ".join(f"{c(x)},{c(y)}" for x, y in pts)
        self.add(f'<polyline points="{p}" fill="none" stroke="{stroke}" stroke-width="{width}"{extra}/>')

    def text(self, x, y, s, anchor="start", size=FONT_SIZE, cls=None, weight=None, rotate=None):
        extra = f' class="{cls}"' if cls else ""
        extra += f' font-weight="{weight}"' if weight else ""
        extra += f' transform="rotate({rotate} {c(x)} {c(y)})"' if rotate is not None else ""
        self.add(f'<text x="{c(x)}" y="{c(y)}" text-anchor="{anchor}" font-size="{size}"{extra}>'
                 f"{escape(str(s))}</text>")

    def marker(self, shape, x, y, size, fill, cls="marker"):
        if shape == "square":
            self.rect(x - size, y - size, 2 * size, 2 * size, fill, cls)
        elif shape == "triangle":
            self.polygon([(x, y - size), (x + size, y + size), (x - size, y + size)], fill, cls)
        elif shape == "diamond":
            self.polygon([(x, y - size), (x + size, y), (x, y + size), (x - size, y)], fill, cls)
        else:
            self.circle(x, y, size, fill, cls)

    def render(self):
        head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
                f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{self.width}" '
                f'height="{self.height}" viewBox="0 0 {self.width} {self.height}" '
                f'font-family={quoteattr(FONT)}>\n')
        title = f"<title>{escape(self.title)}</title>\n" if self.title else ""
        bg = f'<rect x="0" y="0" width="{self.width}" height="{self.height}" fill="#ffffff"/>\n'
        return head + title + bg + "\n".join(self.parts) + "\n</svg>\n"


class Scale:
    """Linear map from data to pixel coordinates."""

    def __init__(self, lo, hi, p0, p1):
        if not hi > lo:
            pad = max(abs(lo), 1.0) * 0.5
            lo, hi = lo - pad, hi + pad
        self.lo, self.hi, self.p0, self.p1 = float(lo), float(hi), float(p0), float(p1)

    def __call__(self, x):
        return self.p0 + (np.asarray(x, dtype=float) - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)


def nice_ticks(lo, hi, n=5):
    """Round tick positions covering [lo, hi]."""
    if not hi > lo:
        return [lo]
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t / step) * step)
        t += step
    return ticks


def padded_range(values, frac=0.05):
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return -1.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo if hi > lo else max(abs(lo), 1.0)
    return lo - frac * span, hi + frac * span


def group_styles(values, table):
    """Map group labels (level order) onto a style table; None when no grouping."""
    if values is None:
        return None, {}
    levels = sorted({str(v) for v in values if v is not None}, key=lambda s: s.encode("utf-8"))
    return [str(v) if v is not None else None for v in values], {lv: table[i % len(table)]
                                                                for i, lv in enumerate(levels)}


def draw_legend(cv, x, y, entries, kind="color"):
    for i, (label, style) in enumerate(entries):
        yy = y + 16 * i
        if kind == "color":
            cv.circle(x + 5, yy - 4, 4, style, "legend-entry")
        else:
            cv.marker(style, x + 5, yy - 4, 4, "#444444", "legend-entry")
        cv.text(x + 14, yy, label, size=FONT_SIZE - 1)
