"""Result tables and their JSON serialization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

TABLE_CATALOG = (
    "meta_analytic_tests",
    "meta_analytic_estimates",
    "meta_regression_terms",
    "meta_regression_coefficients",
    "random_effects_summary",
    "component_inclusion_tests",
    "emm",
    "contrasts",
    "diagnostics",
    "pubbias",
)


@dataclass
class ResultTable:
    """An ordered, named-column table.

    ``rows`` holds one dict per row keyed by column name. Cells that do not
    apply to a row are ``None``.
    """

    name: str
    columns: list[str]
    rows: list[dict[str, Any]] = field(default_factory=list)
    footnotes: list[str] = field(default_factory=list)
    title: str = ""

    def add_row(self, **cells):
        unknown = set(cells) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown columns for table {self.name!r}: {sorted(unknown)}")
        self.rows.append({c: cells.get(c) for c in self.columns})

    def column(self, name):
        return [r[name] for r in self.rows]

    def row(self, key_column, value):
        for r in self.rows:
            if r[key_column] == value:
                return r
        raise KeyError(value)

    def __len__(self):
        return len(self.rows)

    def to_dict(self):
        return {
            "name": self.name,
            "title": self.title,
            "columns": list(self.columns),
            "rows": [[_plain(r[c]) for c in self.columns] for r in self.rows],
            "footnotes": list(self.footnotes),
        }

    @classmethod
    def from_dict(cls, d):
        cols = list(d["columns"])
        rows = [dict(zip(cols, r)) for r in d["rows"]]
        return cls(d["name"], cols, rows, list(d.get("footnotes", [])), d.get("title", ""))


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    return x


def dumps(obj, indent=1):
    """Serialize to JSON with every float written at 17 significant digits.

    Non-finite floats become ``null``. Output depends only on ``obj`` (dict
    key order is preserved), so identical inputs give identical text.
    """
    out = []
    _encode(_plain(obj), out, indent, 0)
    return "".join(out) + "\n"


def _encode(x, out, indent, level):
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    x = _plain(x)
    if x is None or x is True or x is False:
        out.append(json.dumps(x))
    elif isinstance(x, float):
        out.append(format(x, ".17g") if math.isfinite(x) else "null")
    elif isinstance(x, int):
        out.append(str(x))
    elif isinstance(x, str):
        out.append(json.dumps(x, ensure_ascii=False))
    elif isinstance(x, dict):
        if not x:
            out.append("{}")
            return
        out.append("{")
        for i, (k, v) in enumerate(x.items()):
            out.append(("," if i else "") + pad + json.dumps(str(k), ensure_ascii=False) + ": ")
            _encode(v, out, indent, level + 1)
        out.append(end + "}")
    elif isinstance(x, (list, tuple)):
        if not x:
            out.append("[]")
            return
        flat = all(not isinstance(_plain(v), (dict, list, tuple)) for v in x)
        out.append("[")
        for i, v in enumerate(x):
            if flat:
                out.append(", " if i else "")
            else:
                out.append(("," if i else "") + pad)
            _encode(v, out, indent, level + 1)
        out.append(("" if flat else end) + "]")
    else:
        raise TypeError(f"cannot serialize {type(x).__name__}")
