"""Block-diagonal sampling variance-covariance matrices for dependent estimates."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError, PSDViolationError, SchemaError
from ..ingest import Dataset

PSD_TOL = 1e-10
SYM_TOL = 1e-10


@dataclass(frozen=True)
class VcalcSpec:
    cluster: str
    construct: str | None = None
    construct_type: str | None = None
    rho_within_type: float = 0.0
    rho_between_type: float = 0.0

    def __post_init__(self):
        for r in (self.rho_within_type, self.rho_between_type):
            if not -1.0 <= r <= 1.0:
                raise SchemaError(f"correlation {r} outside [-1, 1]")
        if self.construct_type is not None and self.construct is None:
            raise SchemaError("construct_type requires construct")


@dataclass(frozen=True)
class VMatrix:
    V: np.ndarray
    row_ids: np.ndarray
    clusters: np.ndarray | None = None

    @property
    def k(self):
        return self.V.shape[0]

    def take(self, idx):
        idx = np.asarray(idx)
        cl = None if self.clusters is None else self.clusters[idx]
        return VMatrix(self.V[np.ix_(idx, idx)], self.row_ids[idx], cl)


def _labels(d, col):
    vals = d[col]
    if d.missing(col).any():
        raise SchemaError(f"column {col!r} has missing values")
    return np.array([str(v) if not isinstance(v, float) else repr(v) for v in vals], dtype=object)


def check_psd(V, name="V"):
    w = np.linalg.eigvalsh(0.5 * (V + V.T))
    top = max(float(w.max()), 0.0)
    if w.min() < -PSD_TOL * top:
        raise PSDViolationError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3g})", name)


def vcalc(spec: VcalcSpec, d: Dataset, vi="vi") -> VMatrix:
    """Construct V from cluster membership and construct types.

    Within a cluster ``V[i, j] = r * sqrt(v_i v_j)`` with ``r`` the
    within-type correlation when both rows share a construct type (or when no
    types are given) and the between-type correlation otherwise. Rows in
    different clusters are uncorrelated (exact zeros).
    """
    v = np.asarray(d.real(vi), dtype=float)
    if np.any(~(v > 0)):
        raise SchemaError("vcalc requires vi > 0 in every row")
    cl = _labels(d, spec.cluster)
    types = _labels(d, spec.construct_type) if spec.construct_type else None
    if spec.construct is not None:
        _labels(d, spec.construct)
    k = len(v)
    V = np.zeros((k, k))
    sd = np.sqrt(v)
    order = sorted(set(cl), key=lambda s: s.encode("utf-8"))
    for g in order:
        idx = np.flatnonzero(cl == g)
        if types is None:
            R = np.full((len(idx), len(idx)), spec.rho_within_type)
        else:
            t = types[idx]
            R = np.where(t[:, None] == t[None, :], spec.rho_within_type, spec.rho_between_type)
        np.fill_diagonal(R, 1.0)
        block = R * np.outer(sd[idx], sd[idx])
        np.fill_diagonal(block, v[idx])
        try:
            check_psd(block, g)
        except PSDViolationError:
            raise PSDViolationError(f"V block for cluster {g!r} is not positive semidefinite", g) from None
        V[np.ix_(idx, idx)] = block
    return VMatrix(V, np.asarray(d.row_ids), cl)


def save_V(V, path):
    """Write V as headerless CSV with 17 significant digits (lossless)."""
    M = V.V if isinstance(V, VMatrix) else np.asarray(V, dtype=float)
    buf = io.StringIO()
    for row in M:
        buf.write(",".join(format(float(x), ".17g") for x in row))
        buf.write("\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_precomputed_V(path, d: Dataset) -> VMatrix:
    """Read a V matrix written by :func:`save_V` (or by hand) for dataset ``d``."""
    text = Path(path).read_text(encoding="utf-8")
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    try:
        M = np.array([[float(x) for x in r] for r in rows], dtype=float)
    except ValueError as e:
        raise FormatError(f"non-numeric entry in V file: {e}") from None
    if M.ndim != 2 or (len(rows) and any(len(r) != len(rows) for r in rows)):
        raise FormatError("V file is not a square matrix")
    if M.shape[0] != len(d):
        raise FormatError(f"V is {M.shape[0]}x{M.shape[1]} but the dataset has {len(d)} rows")
    if not np.all(np.isfinite(M)):
        raise FormatError("V contains NaN or infinite entries")
    if np.max(np.abs(M - M.T), initial=0.0) > SYM_TOL * max(1.0, np.abs(M).max(initial=0.0)):
        raise FormatError("V is not symmetric")
    dg = np.diag(M)
    if np.any(dg < 0):
        raise PSDViolationError("V has a negative diagonal entry", None)
    bound = np.sqrt(np.outer(dg, dg))
    bad = np.argwhere(np.abs(M) > bound * (1 + 1e-12))
    if len(bad):
        i, j = bad[0]
        raise PSDViolationError(f"V[{i},{j}] exceeds the Cauchy-Schwarz bound sqrt(v_i v_j)", (int(i), int(j)))
    check_psd(M)
    return VMatrix(M, np.asarray(d.row_ids))


def nested_components(d: Dataset, level1, level2=None):
    """Grouping labels for nested random intercepts.

    Returns ``{level1: labels, "level1/level2": composite labels}``; inner
    ids are keyed by their outer group so reused ids across studies are
    distinct.
    """
    out = {level1: _labels(d, level1)}
    if level2 is not None:
        inner = _labels(d, level2)
        out[f"{level1}/{level2}"] = np.array([f"{a}\x1f{b}" for a, b in zip(out[level1], inner)], dtype=object)
    return out


def indicator_cross(labels):
    """``Z Z'`` for a random intercept: 1 where two rows share a label."""
    labels = np.asarray(labels, dtype=object)
    return (labels[:, None] == labels[None, :]).astype(float)
