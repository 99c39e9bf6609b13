"""Two-phase phantom segmentation with cross-phase translation."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    HU_MAX,
    HU_MIN,
    Case,
    Dataset,
    FoldSplit,
    LabelMask,
    Phase,
    Volume,
    clamp_hu,
    dsc,
    split_folds,
)
