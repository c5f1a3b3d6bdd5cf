"""Listwise passage reranking: masked list attention, circle loss, iterative inference."""
from .dataset import RankingDataset, load_dataset, synthesize_dataset
from .embedder import hash_embed, load_embedding_file
from .evalkit import average_precision, evaluate
from .inference import IterConfig, RankMode, Reranker, iterative_rerank, rank_direct
from .kernels import BACKEND
from .loss import CircleLossConfig, LabeledScores, bce_loss, circle_loss, circle_loss_grad
from .model import AttentionVariant, FeatureMode, ModelConfig, build_mask, init_params, list_encode, score
from .trainer import StageConfig, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttentionVariant",
    "BACKEND",
    "CircleLossConfig",
    "FeatureMode",
    "IterConfig",
    "LabeledScores",
    "ModelConfig",
    "RankMode",
    "RankingDataset",
    "Reranker",
    "StageConfig",
    "TrainConfig",
    "average_precision",
    "bce_loss",
    "build_mask",
    "circle_loss",
    "circle_loss_grad",
    "evaluate",
    "hash_embed",
    "init_params",
    "iterative_rerank",
    "list_encode",
    "load_dataset",
    "load_embedding_file",
    "rank_direct",
    "score",
    "synthesize_dataset",
    "train",
]
