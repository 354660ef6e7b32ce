"""Desk-scale simulator of sparse federated training for a small grid detector."""

from .autodiff import BatchNormLayer, GradTape, ShapeError, Tensor, backward
from .config import ConfigError, ExperimentConfig, build_config
from .data import DetectionDataset, SceneSpec, encode_grid_target, generate, make_dataset, partition
from .detection import DetectionBox, GridTarget, LossConfig, decode, yolo_loss
from .evaluation import EvalContext, EvalResult, average_precision, iou, nms
from .federation import (
    ClientState,
    ClientUpdate,
    RoundReport,
    ServerState,
    comm_accounting,
    edge_model_update,
    fedavg_aggregate,
    fedweg_aggregate,
    fedweg_weights,
    run_round,
    sample_clients,
)
from .model import DetectorConfig, ModelParams, build_model, forward, sgd_step
from .runner import ExperimentResult, run_experiment
from .sparsify import (
    SparseMask,
    apply_mask,
    build_mask,
    global_threshold,
    l1_penalty,
    prune_report,
)

__all__ = [
    "BatchNormLayer",
    "ClientState",
    "ClientUpdate",
    "ConfigError",
    "DetectionBox",
    "DetectionDataset",
    "DetectorConfig",
    "EvalContext",
    "EvalResult",
    "ExperimentConfig",
    "ExperimentResult",
    "GradTape",
    "GridTarget",
    "LossConfig",
    "ModelParams",
    "RoundReport",
    "SceneSpec",
    "ServerState",
    "ShapeError",
    "SparseMask",
    "Tensor",
    "apply_mask",
    "average_precision",
    "backward",
    "build_config",
    "build_mask",
    "build_model",
    "comm_accounting",
    "decode",
    "edge_model_update",
    "encode_grid_target",
    "fedavg_aggregate",
    "fedweg_aggregate",
    "fedweg_weights",
    "forward",
    "generate",
    "global_threshold",
    "iou",
    "l1_penalty",
    "make_dataset",
    "nms",
    "partition",
    "prune_report",
    "run_experiment",
    "run_round",
    "sample_clients",
    "sgd_step",
    "yolo_loss",
]
