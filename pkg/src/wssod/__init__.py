"""Point-supervised pseudo-labelling for weakly semi-supervised object detection."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    BBox,
    ImageSample,
    InvalidInputError,
    LabeledBox,
    PointAnnotation,
    ProposalSet,
    contains,
    iou,
    nms,
)
from .matching import MatchConfig, MatchResult, generate_pseudo_labels, hungarian_assign  # noqa: E402
from .mil import LossWeights, image_mil_loss, point_bag_score, point_mil_loss, total_loss  # noqa: E402

__all__ = [
    "BBox",
    "ImageSample",
    "InvalidInputError",
    "LabeledBox",
    "LossWeights",
    "MatchConfig",
    "MatchResult",
    "PointAnnotation",
    "ProposalSet",
    "contains",
    "generate_pseudo_labels",
    "hungarian_assign",
    "image_mil_loss",
    "iou",
    "nms",
    "point_bag_score",
    "point_mil_loss",
    "total_loss",
]
