"""Cluster-level feature alignment with non-parametric class anchors."""

__version__ = "0.1.0"

from ._backend import BACKEND
from .anchors import AnchorSet, UpdateSchedule, aggregate_average, aggregate_weighted, ema_update, schedule_should_update
from .data import Dataset, SyntheticSpec, generate_synthetic, read_dataset, split_query_gallery, write_dataset
from .encoder import EncoderModel, backward, embed_dataset, forward, init_model
from .evaluation import cluster_stats, evaluate_retrieval, retrieval_from_features
from .losses import (
    CenterBank, anchor_loss, batch_hard_triplet, combine, cross_entropy_ls, parametric_center_loss,
    triplet_anchor_loss,
)
from .trainer import TrainConfig, TrainLog, Trainer, lr_at, optimizer_step, resume, train

__all__ = [
    "BACKEND", "AnchorSet", "UpdateSchedule", "aggregate_average", "aggregate_weighted", "ema_update",
    "schedule_should_update", "Dataset", "SyntheticSpec", "generate_synthetic", "read_dataset",
    "split_query_gallery", "write_dataset", "EncoderModel", "backward", "embed_dataset", "forward",
    "init_model", "cluster_stats", "evaluate_retrieval", "retrieval_from_features", "CenterBank",
    "anchor_loss", "batch_hard_triplet", "combine", "cross_entropy_ls", "parametric_center_loss",
    "triplet_anchor_loss", "TrainConfig", "TrainLog", "Trainer", "lr_at", "optimizer_step", "resume", "train",
]
