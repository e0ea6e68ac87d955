"""Tabular study data: CSV loading, subsetting, missingness, column transforms."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ParseError, SchemaError

REAL = "real"
CATEGORICAL = "categorical"
TEXT = "text"
_TYPES = (REAL, CATEGORICAL, TEXT)

MISSING_TOKENS = frozenset({"", "na", "nan"})

TRANSFORMS = {
    "sqrt": (np.sqrt, lambda x: x >= 0),
    "square": (np.square, lambda x: np.isfinite(x)),
    "log": (np.log, lambda x: x > 0),
    "exp": (np.exp, lambda x: np.isfinite(x)),
}


def _level_key(s):
    return s.encode("utf-8")


def _is_missing_token(s):
    return s.strip().lower() in MISSING_TOKENS


def _frozen(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable column store.

    Real columns are float64 arrays with NaN for missing values; categorical
    and text columns are object arrays holding ``str`` or ``None``. ``row_ids``
    are the original 0-based row positions and survive filtering.
    """

    columns: Mapping[str, np.ndarray]
    types: Mapping[str, str]
    row_ids: np.ndarray
    levels: Mapping[str, tuple] = field(default_factory=dict)
    violations: Mapping[str, int] = field(default_factory=dict)

    @classmethod
    def from_columns(cls, data, types=None):
        """Build a dataset from ``name -> sequence``; types inferred when not given."""
        types = dict(types or {})
        cols, tps, lv = {}, {}, {}
        n = None
        for name, values in data.items():
            values = list(values) if not isinstance(values, np.ndarray) else values
            if n is None:
                n = len(values)
            elif len(values) != n:
                raise SchemaError(f"column {name!r} has {len(values)} rows, expected {n}")
            tp = types.get(name) or _infer_type(values)
            cols[name], lv_name = _coerce(values, tp)
            tps[name] = tp
            if lv_name is not None:
                lv[name] = lv_name
        n = n or 0
        return cls(cols, tps, _frozen(np.arange(n)), lv)

    def __post_init__(self):
        for name, tp in self.types.items():
            if tp not in _TYPES:
                raise SchemaError(f"column {name!r}: unknown type {tp!r}")
        for a in self.columns.values():
            if isinstance(a, np.ndarray) and a.flags.writeable:
                a.setflags(write=False)

    def __len__(self):
        return len(self.row_ids)

    @property
    def names(self):
        return list(self.columns)

    def __contains__(self, name):
        return name in self.columns

    def __getitem__(self, name):
        self._check(name)
        return self.columns[name]

    def _check(self, *names):
        for name in names:
            if name not in self.columns:
                raise SchemaError(f"unknown column {name!r}")

    def missing(self, name):
        """Boolean mask of missing cells in ``name``."""
        a = self[name]
        if self.types[name] == REAL:
            return np.isnan(a)
        return np.array([v is None for v in a], dtype=bool)

    def real(self, name):
        self._check(name)
        if self.types[name] != REAL:
            raise SchemaError(f"column {name!r} is {self.types[name]}, not real")
        return self.columns[name]

    def take(self, mask_or_index):
        """Row subset; row ids and level sets are kept."""
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        cols = {k: _frozen(v[idx]) for k, v in self.columns.items()}
        return Dataset(cols, dict(self.types), _frozen(self.row_ids[idx]), dict(self.levels),
                       dict(self.violations))

    def rows_for(self, row_ids):
        pos = {int(r): i for i, r in enumerate(self.row_ids)}
        try:
            return self.take(np.array([pos[int(r)] for r in row_ids], dtype=int))
        except KeyError as e:
            raise SchemaError(f"row id {e.args[0]} not in dataset") from None

    def with_column(self, name, values, type_=REAL, replace=False, violations=None):
        if name in self.columns and not replace:
            raise SchemaError(f"column {name!r} already exists")
        values, lv = _coerce(values, type_)
        if len(values) != len(self):
            raise SchemaError(f"column {name!r} has {len(values)} rows, expected {len(self)}")
        cols = dict(self.columns)
        cols[name] = values
        types = dict(self.types)
        types[name] = type_
        levels = dict(self.levels)
        levels.pop(name, None)
        if lv is not None:
            levels[name] = lv
        viol = dict(self.violations)
        if violations is not None:
            viol[name] = violations
        return Dataset(cols, types, self.row_ids, levels, viol)

    def observed_levels(self, name):
        """Levels of a categorical column that occur in this view, in level order."""
        present = {v for v in self[name] if v is not None}
        return tuple(lv for lv in self.levels.get(name, ()) if lv in present)


def _infer_type(values):
    for v in values:
        if v is None:
            continue
        if isinstance(v, (float, int, np.floating, np.integer)) and not isinstance(v, bool):
            continue
        if isinstance(v, str) and (_is_missing_token(v) or _parses_float(v)):
            continue
        return CATEGORICAL
    return REAL


def _parses_float(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def _coerce(values, tp):
    if tp == REAL:
        out = np.empty(len(values), dtype=float)
        for i, v in enumerate(values):
            if v is None or (isinstance(v, str) and _is_missing_token(v)):
                out[i] = np.nan
            else:
                try:
                    out[i] = float(v)
                except (TypeError, ValueError):
                    raise SchemaError(f"value {v!r} is not a real number") from None
        return _frozen(out), None
    out = np.empty(len(values), dtype=object)
    for i, v in enumerate(values):
        if v is None or (isinstance(v, float) and np.isnan(v)):
            out[i] = None
        elif isinstance(v, str):
            out[i] = None if _is_missing_token(v) else v.strip()
        elif isinstance(v, float) and float(v).is_integer():
            out[i] = str(int(v))
        else:
            out[i] = str(v)
    levels = None
    if tp == CATEGORICAL:
        levels = tuple(sorted({v for v in out if v is not None}, key=_level_key))
    return _frozen(out), levels


def read_csv_text(text, type_hints=None):
    """Parse CSV text (header row mandatory) into a :class:`Dataset`."""
    type_hints = dict(type_hints or {})
    reader = csv.reader(io.StringIO(text, newline=""), strict=True)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file, header row required", line=1) from None
    except csv.Error as e:
        raise ParseError(str(e), line=reader.line_num) from None
    header = [h.strip() for h in header]
    seen = set()
    for h in header:
        if h in seen:
            raise SchemaError(f"duplicate column name {h!r}")
        seen.add(h)
    for name, tp in type_hints.items():
        if tp not in _TYPES:
            raise SchemaError(f"type hint for {name!r}: unknown type {tp!r}")
    raw = [[] for _ in header]
    while True:
        try:
            rec = next(reader)
        except StopIteration:
            break
        except csv.Error as e:
            raise ParseError(str(e), line=reader.line_num) from None
        if not rec:
            continue
        if len(rec) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(rec)}", line=reader.line_num)
        for j, cell in enumerate(rec):
            raw[j].append(cell)
    data = dict(zip(header, raw))
    types = {}
    for name, vals in data.items():
        hint = type_hints.get(name)
        if hint is not None:
            types[name] = hint
        else:
            numeric = all(_is_missing_token(v) or _parses_float(v) for v in vals)
            types[name] = REAL if numeric else CATEGORICAL
    return Dataset.from_columns(data, types)


def load_csv(path, type_hints=None):
    """Load an RFC-4180 UTF-8 CSV file.

    Columns whose every non-missing cell parses as a float are typed real,
    everything else categorical, unless ``type_hints`` says otherwise.
    Empty cells, ``NA`` and ``NaN`` (any case) are missing.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise SchemaError(f"cannot read data file {path}: {e.strerror}") from None
    try:
        text = raw.decode("utf-8-sig")
    except UnicodeDecodeError as e:
        raise ParseError(f"not valid UTF-8: {e}") from None
    return read_csv_text(text, type_hints)


def _real_text(x):
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


def write_csv(d: Dataset, path):
    """Write a dataset back to CSV; reals use the shortest round-trip repr
    (integral values without a trailing ``.0``)."""
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(d.names)
    for i in range(len(d)):
        row = []
        for name in d.names:
            v = d.columns[name][i]
            if d.types[name] == REAL:
                row.append("" if np.isnan(v) else _real_text(float(v)))
            else:
                row.append("" if v is None else v)
        w.writerow(row)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def apply_subset(d: Dataset, column: str, allowed: Iterable) -> Dataset:
    """Keep rows whose ``column`` value is in ``allowed``; missing never matches."""
    a = d[column]
    allowed = list(allowed)
    if d.types[column] == REAL:
        vals = {float(x) for x in allowed}
        mask = np.array([(not np.isnan(v)) and v in vals for v in a], dtype=bool)
    else:
        vals = {str(x) for x in allowed}
        mask = np.array([v is not None and v in vals for v in a], dtype=bool)
    return d.take(mask)


@dataclass(frozen=True)
class CompleteCaseReport:
    kept_row_ids: list
    n_omitted: int
    omitted_reasons: dict

    @property
    def n_kept(self):
        return len(self.kept_row_ids)


def complete_cases(d: Dataset, required: Iterable[str]) -> CompleteCaseReport:
    """List-wise deletion over ``required``; each omitted row is blamed on its
    first missing column in ``required`` order."""
    required = list(required)
    d._check(*required)
    masks = [(c, d.missing(c)) for c in required]
    kept, reasons = [], {}
    for i, rid in enumerate(d.row_ids):
        for c, m in masks:
            if m[i]:
                reasons[int(rid)] = c
                break
        else:
            kept.append(int(rid))
    return CompleteCaseReport(kept, len(d) - len(kept), reasons)


def transform_values(x, f):
    """Apply a named scalar transform; returns (values, number of domain violations)."""
    try:
        fn, ok = TRANSFORMS[f]
    except KeyError:
        raise SchemaError(f"unknown transform {f!r}; expected one of {sorted(TRANSFORMS)}") from None
    x = np.asarray(x, dtype=float)
    present = ~np.isnan(x)
    valid = np.zeros_like(present)
    valid[present] = ok(x[present])
    out = np.full_like(x, np.nan)
    with np.errstate(all="ignore"):
        out[valid] = fn(x[valid])
    bad = valid & ~np.isfinite(out)
    out[bad] = np.nan
    return out, int((present & ~valid).sum() + bad.sum())


def transform_column(d: Dataset, source: str, f: str, target: str) -> Dataset:
    """Add ``target = f(source)``. Violations are recorded in ``violations[target]``."""
    x = d.real(source)
    if target in d:
        raise SchemaError(f"column {target!r} already exists")
    out, n_bad = transform_values(x, f)
    return d.with_column(target, out, REAL, violations=n_bad)
