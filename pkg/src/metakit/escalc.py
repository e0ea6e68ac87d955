"""Effect sizes and sampling variances from study summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import DomainError, SchemaError
from .ingest import REAL, Dataset

MEASURES_2X2 = ("logRR", "logOR", "RD")
CONTINUITY = 0.5


@dataclass(frozen=True)
class TwoByTwo:
    a: float
    b: float
    c: float
    d: float

    @property
    def n1(self):
        return self.a + self.b

    @property
    def n2(self):
        return self.c + self.d

    @property
    def has_zero(self):
        return min(self.a, self.b, self.c, self.d) == 0

    def swapped(self):
        return TwoByTwo(self.c, self.d, self.a, self.b)

    def corrected(self, add=CONTINUITY):
        return TwoByTwo(self.a + add, self.b + add, self.c + add, self.d + add)


@dataclass(frozen=True)
class ContinuousGroups:
    m1: float
    m2: float
    sd1: float
    sd2: float
    n1: float
    n2: float

    def swapped(self):
        return ContinuousGroups(self.m2, self.m1, self.sd2, self.sd1, self.n2, self.n1)


@dataclass(frozen=True)
class EffectSizeRecord:
    yi: float
    vi: float
    row_id: int | None = None
    estimable: bool = True
    note: str = ""
    corrected: bool = False

    @property
    def sei(self):
        return math.sqrt(self.vi) if self.estimable else math.nan

    @classmethod
    def not_estimable(cls, note, row_id=None):
        return cls(math.nan, math.nan, row_id, False, note)


def compute_2x2(t: TwoByTwo, measure: str, row_id=None) -> EffectSizeRecord:
    """Log risk ratio, log odds ratio or risk difference of group 1 vs group 2.

    Tables with any zero cell get 0.5 added to all four cells. Double-zero
    tables (no events or no non-events in both groups) are not estimable on
    the ratio scales.
    """
    if measure not in MEASURES_2X2:
        raise SchemaError(f"unknown measure {measure!r}; expected one of {MEASURES_2X2}")
    cells = (t.a, t.b, t.c, t.d)
    if any(not math.isfinite(x) for x in cells):
        return EffectSizeRecord.not_estimable("missing count", row_id)
    if min(cells) < 0:
        raise DomainError(f"negative cell count in {t}")
    if t.n1 < 1 or t.n2 < 1:
        return EffectSizeRecord.not_estimable("empty group", row_id)
    if measure != "RD" and ((t.a == 0 and t.c == 0) or (t.b == 0 and t.d == 0)):
        return EffectSizeRecord.not_estimable("not estimable: double-zero table", row_id)
    corrected = t.has_zero
    if corrected:
        t = t.corrected()
    a, b, c, d, n1, n2 = t.a, t.b, t.c, t.d, t.n1, t.n2
    if measure == "logRR":
        yi = math.log(a / n1) - math.log(c / n2)
        vi = 1 / a - 1 / n1 + 1 / c - 1 / n2
    elif measure == "logOR":
        yi = math.log(a) + math.log(d) - math.log(b) - math.log(c)
        vi = 1 / a + 1 / b + 1 / c + 1 / d
    else:
        yi = a / n1 - c / n2
        vi = a * b / n1**3 + c * d / n2**3
    return EffectSizeRecord(yi, vi, row_id, corrected=corrected)


def hedges_j(df, exact=False):
    """Small-sample bias correction for a standardized mean difference."""
    if exact:
        return math.exp(gammaln(df / 2) - 0.5 * math.log(df / 2) - gammaln((df - 1) / 2))
    return 1 - 3 / (4 * df - 1)


def compute_smd(g: ContinuousGroups, exact_j=False, row_id=None) -> EffectSizeRecord:
    """Bias-corrected standardized mean difference (Hedges' g).

    ``exact_j`` switches from the usual ``1 - 3/(4df - 1)`` approximation to
    the gamma-function form of the correction factor.
    """
    if g.n1 < 2 or g.n2 < 2:
        raise DomainError("each group needs at least 2 observations")
    if g.sd1 < 0 or g.sd2 < 0:
        raise DomainError("standard deviations must be nonnegative")
    df = g.n1 + g.n2 - 2
    sp = math.sqrt(((g.n1 - 1) * g.sd1**2 + (g.n2 - 1) * g.sd2**2) / df)
    if sp == 0:
        return EffectSizeRecord.not_estimable("not estimable: pooled sd is zero", row_id)
    yi = hedges_j(df, exact_j) * (g.m1 - g.m2) / sp
    vi = 1 / g.n1 + 1 / g.n2 + yi**2 / (2 * (g.n1 + g.n2))
    return EffectSizeRecord(yi, vi, row_id)


def compute_fisher_z(r: float, n: float, row_id=None) -> EffectSizeRecord:
    if not abs(r) < 1:
        raise DomainError(f"correlation must lie in (-1, 1), got {r}")
    if n < 4:
        raise DomainError(f"sample size must be at least 4, got {n}")
    return EffectSizeRecord(math.atanh(r), 1 / (n - 3), row_id)


_INPUTS = {
    "logRR": ("a", "b", "c", "d"),
    "logOR": ("a", "b", "c", "d"),
    "RD": ("a", "b", "c", "d"),
    "SMD": ("m1", "m2", "sd1", "sd2", "n1", "n2"),
    "ZCOR": ("r", "n"),
}


def required_inputs(measure):
    try:
        return _INPUTS[measure]
    except KeyError:
        raise SchemaError(f"unknown measure {measure!r}; expected one of {sorted(_INPUTS)}") from None


def compute_rows(d: Dataset, measure: str, columns: dict, exact_j=False):
    """Compute one measure for every row of ``d``.

    ``columns`` maps the measure's input names (see :func:`required_inputs`)
    to dataset columns. Returns a list of records, one per row, in row order.
    Rows with a missing input or a domain problem come back not estimable.
    """
    need = required_inputs(measure)
    missing = [k for k in need if k not in columns]
    if missing:
        raise SchemaError(f"measure {measure} needs inputs {missing}")
    arrays = {k: d.real(columns[k]) for k in need}
    out = []
    for i, rid in enumerate(d.row_ids):
        vals = {k: float(arrays[k][i]) for k in need}
        rid = int(rid)
        if any(math.isnan(v) for v in vals.values()):
            out.append(EffectSizeRecord.not_estimable("missing input", rid))
            continue
        try:
            if measure in MEASURES_2X2:
                out.append(compute_2x2(TwoByTwo(**vals), measure, rid))
            elif measure == "SMD":
                out.append(compute_smd(ContinuousGroups(**vals), exact_j, rid))
            else:
                out.append(compute_fisher_z(vals["r"], vals["n"], rid))
        except DomainError as e:
            out.append(EffectSizeRecord.not_estimable(str(e), rid))
    return out


def append_effect_sizes(d: Dataset, records, names=("yi", "vi", "sei"), fill=False):
    """Write records into yi/vi/sei columns.

    With ``fill=True`` existing columns are updated only where they are still
    missing, which is how chained computations over row subsets combine.
    """
    pos = {int(r): i for i, r in enumerate(d.row_ids)}
    cols = {}
    for name in names:
        if name in d and fill:
            cols[name] = np.array(d.real(name), dtype=float)
        elif name in d:
            raise SchemaError(f"column {name!r} already exists")
        else:
            cols[name] = np.full(len(d), np.nan)
    for rec in records:
        i = pos[rec.row_id]
        if not rec.estimable or not np.isnan(cols[names[0]][i]):
            continue
        cols[names[0]][i], cols[names[1]][i], cols[names[2]][i] = rec.yi, rec.vi, rec.sei
    for name in names:
        d = d.with_column(name, cols[name], REAL, replace=True)
    return d
