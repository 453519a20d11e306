"""Graph Shell Attention: graph transformer layers whose experts read k-hop shells."""
from .autodiff import Tape, Tensor, backward, finite_diff_gradcheck, param
from .graph import (Graph, GraphError, SbmConfig, attention_support, batch, generate_sbm,
                    khop_index, load_jsonl_dataset, save_jsonl_dataset)
from .gtl import LayerConfig, gtl_forward, readout
from .model import SeaConfig, SeaModel, build_model, model_forward, route
from .spectral import ConvergenceError, eigendecompose_symmetric, lpe, normalized_laplacian
from .train import (TrainConfig, evaluate, expert_distribution_report, load_model,
                    oversmoothing_diagnostic, roc_auc, train)

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "finite_diff_gradcheck", "param",
    "Graph", "GraphError", "SbmConfig", "attention_support", "batch", "generate_sbm",
    "khop_index", "load_jsonl_dataset", "save_jsonl_dataset",
    "LayerConfig", "gtl_forward", "readout",
    "SeaConfig", "SeaModel", "build_model", "model_forward", "route",
    "ConvergenceError", "eigendecompose_symmetric", "lpe", "normalized_laplacian",
    "TrainConfig", "evaluate", "expert_distribution_report", "load_model",
    "oversmoothing_diagnostic", "roc_auc", "train",
]
