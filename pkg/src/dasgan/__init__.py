"""Joint unpaired stain translation and epithelium segmentation toolkit."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    ClassPosterior,
    DatasetSplit,
    Domain,
    IGNORE,
    ImagePatch,
    LabelMask,
    NUM_CLASSES,
    OTHER,
    TC_NEG,
    TC_POS,
    argmax_mask,
    encode_one_hot,
)
from .errors import DasganError  # noqa: F401
from .losses import LossReport, LossWeights  # noqa: F401
