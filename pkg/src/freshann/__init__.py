"""freshann: a dynamic graph ANN engine with an SSD tier and streaming merge."""

from .core import (
    FileFormatError,
    GroundTruth,
    RecallReport,
    VectorSet,
    brute_force_knn,
    ground_truth,
    l2_distance,
    load_vectors,
    recall_at_k,
)
from .graph import DynGraph, SearchResult, build_static
from .pq import PQCodebook, PQCodes, train_codebook

__all__ = [
    "FileFormatError",
    "GroundTruth",
    "RecallReport",
    "VectorSet",
    "brute_force_knn",
    "ground_truth",
    "l2_distance",
    "load_vectors",
    "recall_at_k",
    "DynGraph",
    "SearchResult",
    "build_static",
    "PQCodebook",
    "PQCodes",
    "train_codebook",
]
