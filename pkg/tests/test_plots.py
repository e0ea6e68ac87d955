import re
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metakit.cli import main
from metakit.errors import InsufficientDataError, SchemaError
from metakit.plots import PlotSpec, bubble_svg, forest_svg, funnel_svg
from metakit.uni import UniModelSpec, fit_uni, subgroup_analysis

ROOT = Path(__file__).resolve().parent.parent
GOLDEN = Path(__file__).resolve().parent / "golden"


def count(svg, cls):
    return len(re.findall(rf'class="(?:[^"]* )?{cls}(?: [^"]*)?"', svg))


def test_funnel_counts_and_legend(bcg, bcg_fit):
    svg = funnel_svg(bcg.real("yi"), bcg.real("sei"), bcg_fit, labels=list(bcg["author"]),
                     colors=list(bcg["alloc"]))
    assert count(svg, "marker") == 13
    assert count(svg, "legend-entry") == 3
    assert count(svg, "funnel-region") == 3


def test_funnel_errors():
    with pytest.raises(InsufficientDataError):
        funnel_svg([], [])
    with pytest.raises(SchemaError):
        funnel_svg([0.1], [0.0])
    with pytest.raises(SchemaError):
        funnel_svg([0.1], [0.1], levels=(0.8,))


def test_forest_counts(bcg, bcg_fit):
    svg = forest_svg(bcg_fit, labels=list(bcg["author"]))
    assert count(svg, "marker") == 13 and count(svg, "diamond") == 1 and count(svg, "pi-bar") == 1
    sg = subgroup_analysis(UniModelSpec(), bcg.real("yi"), bcg.real("vi"), bcg["alloc"])
    svg = forest_svg(bcg_fit, subgroup=sg, subgroup_labels=list(bcg["alloc"]))
    assert count(svg, "diamond") == 4 and count(svg, "marker") == 13
    svg = forest_svg(bcg_fit, aggregation=list(bcg["alloc"]))
    assert count(svg, "marker") == 3


def test_forest_transform_changes_labels_only(bcg_fit):
    a = forest_svg(bcg_fit)
    b = forest_svg(bcg_fit, transform="exp")
    assert a != b
    sizes = r'<rect x="[^"]*" (y="[^"]*" width="[^"]*" height="[^"]*")[^>]*class="marker"'
    assert re.findall(sizes, a) == re.findall(sizes, b)


def test_bubble_modes(bcg, bcg_reg):
    for kw in ({}, {"separate_lines": "alloc"}, {"separate_plots": "alloc"}):
        svg = bubble_svg(bcg_reg, "ablat", **kw)
        assert count(svg, "marker") == 13
    svg = bubble_svg(bcg_reg, "alloc")
    assert count(svg, "marker") == 13 and count(svg, "trend-point") == 3
    with pytest.raises(SchemaError):
        bubble_svg(bcg_reg, "year")
    with pytest.raises(SchemaError):
        bubble_svg(bcg_reg, "ablat", separate_lines="ablat")


def test_plotspec_validation():
    with pytest.raises(SchemaError):
        PlotSpec(width=10)
    with pytest.raises(SchemaError):
        PlotSpec(panel_widths=(1, 0, 1))


@given(st.integers(0, 2**32 - 1), st.integers(3, 25))
def test_svg_determinism_and_marker_parity(seed, k):
    rng = np.random.default_rng(seed)
    y, v = rng.normal(size=k), rng.uniform(0.01, 1, k)
    f = fit_uni(UniModelSpec(method="DL"), y, v)
    a1, a2 = funnel_svg(y, np.sqrt(v), f), funnel_svg(y, np.sqrt(v), f)
    b1, b2 = forest_svg(f), forest_svg(f)
    assert a1 == a2 and b1 == b2
    assert count(a1, "marker") == k and count(b1, "marker") == k


GOLDEN_CASES = [("bcg.yaml", "funnel.svg"), ("bcg.yaml", "forest.svg"), ("bcg_regression.yaml", "bubble.svg")]


@pytest.mark.parametrize("config,name", GOLDEN_CASES)
def test_golden_bcg(tmp_path, config, name):
    assert main(["plot", "--config", str(ROOT / "configs" / config), "--out", str(tmp_path)]) == 0
    got = (tmp_path / name).read_text(encoding="utf-8")
    assert got == (GOLDEN / "bcg" / name).read_text(encoding="utf-8")
