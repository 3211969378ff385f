"""Toolkit for probing which face regions a black-box facial-expression
classifier relies on: superpixel-based local explanations, piecewise affine
standardization into a canonical face space, per-class heatmap aggregation,
and comparison against action-unit-derived ground-truth masks.
"""

__version__ = "0.1.0"

from xfg.expressions import EXPRESSIONS, expression_index

__all__ = ["EXPRESSIONS", "expression_index", "__version__"]
