"""Multi-layer convolutional regional attentions + VLAD place retrieval."""

__version__ = "0.1.0"

from .codebook import Codebook, assign, train_codebook
from .errors import AttnVladError
from .evaluation import (
    CostModelInputs,
    GroundTruth,
    PRCurve,
    power_consumption,
    pr_curve,
    retrieval_time,
)
from .features import RegionalFeatureSet, aggregate_region, build_feature_set, local_descriptor
from .regions import GroupingConfig, Region, RegionSelection, extract_regions, select_top_n
from .tensor_store import ActivationTensor, read_tensor, write_tensor
from .vlad import MatchResult, VladDescriptor, encode_vlad, match_query, similarity

__all__ = [
    "__version__",
    "ActivationTensor",
    "AttnVladError",
    "Codebook",
    "CostModelInputs",
    "GroundTruth",
    "GroupingConfig",
    "MatchResult",
    "PRCurve",
    "Region",
    "RegionSelection",
    "RegionalFeatureSet",
    "VladDescriptor",
    "aggregate_region",
    "assign",
    "build_feature_set",
    "encode_vlad",
    "extract_regions",
    "local_descriptor",
    "match_query",
    "power_consumption",
    "pr_curve",
    "read_tensor",
    "retrieval_time",
    "select_top_n",
    "similarity",
    "train_codebook",
    "write_tensor",
]
