"""floorgraph: learning multi-relational room connectivity from room attributes."""

from .autodiff import AdamState, Tape, Tensor, ShapeError, adam_step, grad_check, grad_check_report
from .features import FeatureMatrix, assemble_features, chain_code, normalize_chain_code
from .floorplan import (
    Floorplan,
    FloorplanError,
    MultiAdjacency,
    Room,
    TaskInstance,
    build_graph,
    knn_graph,
    make_completion_instance,
    make_generation_instance,
)
from .metrics import GedResult, ScoredPairs, average_precision, evaluate, graph_edit_distance, roc_auc
from .model import EdgePredictions, Model, ModelConfig, prepare_instances
from .synthgen import Corpus, GenParams, generate_corpus, generate_floorplan, load_corpus, save_corpus
from .training import LossConfig, TrainConfig, TrainHistory, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Tape",
    "Tensor",
    "ShapeError",
    "adam_step",
    "grad_check",
    "grad_check_report",
    "FeatureMatrix",
    "assemble_features",
    "chain_code",
    "normalize_chain_code",
    "Floorplan",
    "FloorplanError",
    "MultiAdjacency",
    "Room",
    "TaskInstance",
    "build_graph",
    "knn_graph",
    "make_completion_instance",
    "make_generation_instance",
    "GedResult",
    "ScoredPairs",
    "average_precision",
    "evaluate",
    "graph_edit_distance",
    "roc_auc",
    "EdgePredictions",
    "Model",
    "ModelConfig",
    "prepare_instances",
    "Corpus",
    "GenParams",
    "generate_corpus",
    "generate_floorplan",
    "load_corpus",
    "save_corpus",
    "LossConfig",
    "TrainConfig",
    "TrainHistory",
    "train",
]
