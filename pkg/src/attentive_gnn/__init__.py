"""Attentive graph neural network for few-shot classification over feature vectors."""

from .analysis import (
    SmoothingProfile,
    consensus_distance,
    count_trainable_params,
    export_features,
    rank_projection_loss,
    smoothing_profile,
)
from .attention import (
    AttentionConfig,
    ModelParams,
    adjacency_scores,
    apply_node_self_attention,
    fuse_attention,
    gnn_layer,
    init_params,
    label_correlation,
    memory_update,
    model_forward,
    sample_correlation,
    sparsify_topk,
)
from .autodiff import Tensor, backward, finite_diff_check
from .episodes import (
    FeatureDataset,
    TaskGraph,
    build_task_graph,
    generate_synthetic,
    load_features_csv,
    sample_task,
    save_features_csv,
)
from .estimator import AttentiveGNNClassifier
from .training import (
    OptimizerState,
    TrainConfig,
    adam_step,
    evaluate,
    load_checkpoint,
    query_cross_entropy,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "adam_step",
    "adjacency_scores",
    "apply_node_self_attention",
    "AttentionConfig",
    "AttentiveGNNClassifier",
    "backward",
    "build_task_graph",
    "consensus_distance",
    "count_trainable_params",
    "evaluate",
    "export_features",
    "FeatureDataset",
    "finite_diff_check",
    "fuse_attention",
    "generate_synthetic",
    "gnn_layer",
    "init_params",
    "label_correlation",
    "load_checkpoint",
    "load_features_csv",
    "memory_update",
    "model_forward",
    "ModelParams",
    "OptimizerState",
    "query_cross_entropy",
    "rank_projection_loss",
    "sample_correlation",
    "sample_task",
    "save_checkpoint",
    "save_features_csv",
    "smoothing_profile",
    "SmoothingProfile",
    "sparsify_topk",
    "TaskGraph",
    "Tensor",
    "train",
    "TrainConfig",
    "__version__",
]
