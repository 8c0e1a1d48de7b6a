"""Metric monocular depth estimated entirely inside a frozen vision-language
embedding space: a learnable depth table of unit anchors, rotation/fusion
MLPs with hand-derived gradients, contrastive + alignment + RMSE objectives,
two-phase alternating training, and a full evaluation kit."""

from . import cli, dataio, depthhead, evalkit, losses, tensorcore, trainer

__version__ = "0.1.0"

__all__ = [
    "cli",
    "dataio",
    "depthhead",
    "evalkit",
    "losses",
    "tensorcore",
    "trainer",
]
