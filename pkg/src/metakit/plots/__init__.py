"""Deterministic SVG funnel, forest and bubble plots."""

from .bubble import bubble_svg
from .forest import forest_svg
from .funnel import funnel_svg
from .svg import JITTER_SEED, PlotSpec

__all__ = ["JITTER_SEED", "PlotSpec", "bubble_svg", "forest_svg", "funnel_svg"]
