"""Zero-shot alignment of visual embeddings with ensembles of top-k attended description embeddings."""

from .data import (EmbeddingSet, SemanticCodebook, SplitSpec, SyntheticWorldConfig,
                   gen_synthetic_world, load_codebook, load_embedding_set, make_tri_splits)
from .estimator import ZeroShotAligner
from .losses import LossConfig, infonce, jsd_mi, softmax_ce
from .mla import (MlaModel, ensemble_score, load_checkpoint, parse_k_schedule, save_checkpoint,
                  training_free_score)
from .trainer import TrainConfig, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "EmbeddingSet", "SemanticCodebook", "SplitSpec", "SyntheticWorldConfig", "gen_synthetic_world",
    "load_codebook", "load_embedding_set", "make_tri_splits", "ZeroShotAligner", "LossConfig",
    "infonce", "jsd_mi", "softmax_ce", "MlaModel", "ensemble_score", "load_checkpoint",
    "parse_k_schedule", "save_checkpoint", "training_free_score", "TrainConfig", "lr_at", "train",
]
