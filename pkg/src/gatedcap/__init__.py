"""Learnable-gate pruning of attention caption decoders, with magnitude-pruning
baselines, a compressed-row inference runtime and a synthetic captioning task."""

from .autodiff import Tensor, backward, no_grad
from .gates import GatedParameter, SparsityConfig, cosine_anneal, lambda_heuristic
from .sparse import SparseMatrix, SparseModel, report
from .training import TrainConfig, load_checkpoint, save_checkpoint, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad", "GatedParameter", "SparsityConfig", "cosine_anneal", "lambda_heuristic",
    "SparseMatrix", "SparseModel", "report", "TrainConfig", "load_checkpoint", "save_checkpoint",
    "train_stage1", "train_stage2",
]
