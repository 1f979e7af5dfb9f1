from .autodiff import ComputationGraph, Tensor
from .layers import (
    ActivationFault,
    Conv2d,
    Flatten,
    Linear,
    Model,
    Relu,
    build_cnn,
    build_mlp,
    load_checkpoint,
    model_checksum,
    save_checkpoint,
)
from .training import Adam, Sgd, evaluate, evaluate_detailed, make_optimizer, train

__all__ = [
    "ActivationFault", "Adam", "ComputationGraph", "Conv2d", "Flatten",
    "Linear", "Model", "Relu", "Sgd", "Tensor", "build_cnn", "build_mlp",
    "evaluate", "evaluate_detailed", "load_checkpoint", "make_optimizer",
    "model_checksum", "save_checkpoint", "train",
]
