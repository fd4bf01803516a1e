"""Scale-adaptive hierarchical object/part segmentation.

A three-stage cascade: a whole-image pass proposes object regions, each
proposal is zoomed to a canonical scale and re-scored, part regions are
proposed within the zoomed objects and re-scored again, and overlapping
region scores are merged by proposal confidence.
"""

from .grid import AbsBox, Grid2D, LabelMap, ScoreMap

__all__ = ["AbsBox", "Grid2D", "LabelMap", "ScoreMap"]
__version__ = "0.1.0"
