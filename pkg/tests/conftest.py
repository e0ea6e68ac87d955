import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from metakit.escalc import append_effect_sizes, compute_rows
from metakit.ingest import load_csv
from metakit.kernel import build_design
from metakit.uni import UniModelSpec, fit_uni

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = Path(__file__).resolve().parent / "fixtures"
DATA = Path(__file__).resolve().parent / "data"
BCG_CSV = ROOT / "src" / "metakit" / "datasets" / "bcg.csv"

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")


def load_fixture(name):
    return json.loads((FIXTURES / name).read_text())


def bcg_dataset():
    d = load_csv(BCG_CSV)
    return append_effect_sizes(d, compute_rows(d, "logRR", dict(a="tpos", b="tneg", c="cpos", d="cneg")))


@pytest.fixture(scope="session")
def bcg():
    return bcg_dataset()


@pytest.fixture(scope="session")
def bcg_yv(bcg):
    return bcg.real("yi"), bcg.real("vi")


@pytest.fixture(scope="session")
def bcg_fit(bcg):
    return fit_uni(UniModelSpec(), bcg.real("yi"), bcg.real("vi"), build_design(bcg, []), data=bcg)


@pytest.fixture(scope="session")
def bcg_reg(bcg):
    dm = build_design(bcg, ["ablat", "alloc"])
    return fit_uni(UniModelSpec(), bcg.real("yi"), bcg.real("vi"), dm, data=bcg)


def random_meta(rng, k, p=1):
    y = rng.normal(0, 1, k)
    v = rng.uniform(0.05, 1.0, k)
    X = np.column_stack([np.ones(k)] + [rng.normal(0, 1, k) for _ in range(p - 1)])
    return y, v, X
