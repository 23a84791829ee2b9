"""Unsupervised point-cloud representation learning by balanced
optimal-transport clustering jointly trained with stop-gradient contrasting,
plus the evaluation harness that verifies the mechanism."""

from .diffcore import Tape, Tensor, backward, finite_diff_check, stop_gradient
from .errors import ConCluError
from .estimator import ConCluEncoder
from .evaluate import (
    FeatureTable,
    adjusted_rand_index,
    extract_features,
    hard_assignments,
    linear_probe,
)
from .geometry import AugmentConfig, PointCloud, generate_shape, make_views, normalize_cloud
from .network import ModelState, NetworkConfig, init_model
from .objectives import LossBreakdown, Prototypes
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train, train_step
from .transport import TransportPlan, cost_matrix, pseudo_labels, sinkhorn

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "ConCluEncoder",
    "ConCluError",
    "FeatureTable",
    "LossBreakdown",
    "ModelState",
    "NetworkConfig",
    "PointCloud",
    "Prototypes",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TransportPlan",
    "adjusted_rand_index",
    "backward",
    "cost_matrix",
    "extract_features",
    "finite_diff_check",
    "generate_shape",
    "hard_assignments",
    "init_model",
    "linear_probe",
    "load_checkpoint",
    "make_views",
    "normalize_cloud",
    "pseudo_labels",
    "save_checkpoint",
    "sinkhorn",
    "stop_gradient",
    "train",
    "train_step",
]
