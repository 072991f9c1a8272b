"""Facial-hairstyle-aware face verification evaluation.

Quantifies how facial-hairstyle similarity between image pairs biases
false match rates, and calibrates adaptive per-pair-group thresholds that
equalize FMR across hairstyle categories.
"""

from .dataset import (
    Dataset,
    EmbeddingStore,
    ImageRecord,
    attach_ratios,
    build_dataset,
    load_embeddings,
    load_manifest,
    write_embeddings,
    write_manifest,
)
from .errors import CalibrationError, DataError
from .maskops import LabelMask, facial_hair_ratio, iou
from .metrics import ThresholdTable, eer, fmr_at, fnmr_at, inequity_ratio, threshold_for_fmr
from .pairs import PairCategory, PairSpec, RatioClassScheme, classify, enumerate_pairs
from .protocol import ProtocolResult, SplitPlan, run_protocol, split_subjects
from .scoring import ScoreCell, ScoreSet, cosine, score_cells, score_pairs
from .synthgen import GenConfig, generate, oracle_metrics

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "DataError",
    "Dataset",
    "EmbeddingStore",
    "GenConfig",
    "ImageRecord",
    "LabelMask",
    "PairCategory",
    "PairSpec",
    "ProtocolResult",
    "RatioClassScheme",
    "ScoreCell",
    "ScoreSet",
    "SplitPlan",
    "ThresholdTable",
    "attach_ratios",
    "build_dataset",
    "classify",
    "cosine",
    "eer",
    "enumerate_pairs",
    "facial_hair_ratio",
    "fmr_at",
    "fnmr_at",
    "generate",
    "inequity_ratio",
    "iou",
    "load_embeddings",
    "load_manifest",
    "oracle_metrics",
    "run_protocol",
    "score_cells",
    "score_pairs",
    "split_subjects",
    "threshold_for_fmr",
    "write_embeddings",
    "write_manifest",
]
