"""Occlusion-aware person re-identification on a small numpy autodiff engine."""
from . import errors, kernels, tensor
from .errors import ReIDError
from .evaluation import (EvalProtocol, EvalReport, FeatureStore, distance_matrix, evaluate,
                         read_features, retrieve_case, write_features)
from .losses import LossConfig, LossWeights, joint_loss
from .model import PCDNetConfig, forward, init_params, saliency_map
from .tensor import Tensor, backward, grad_check, no_grad
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "errors", "kernels", "tensor", "ReIDError",
    "EvalProtocol", "EvalReport", "FeatureStore", "distance_matrix", "evaluate",
    "read_features", "retrieve_case", "write_features",
    "LossConfig", "LossWeights", "joint_loss",
    "PCDNetConfig", "forward", "init_params", "saliency_map",
    "Tensor", "backward", "grad_check", "no_grad",
    "Checkpoint", "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
