"""Tangent kernels and kernel-machine decompositions of gradient-descent training."""

from tkl import analysis, data, kernel, nn, training
from tkl._backend import name as backend_name
from tkl.nn import ModelSpec, ParamVector, init_params
from tkl.training import LearningPath, TrainConfig, load_path, save_path, train_full_batch

__version__ = "0.1.0"

__all__ = [
    "analysis", "data", "kernel", "nn", "training", "backend_name", "ModelSpec",
    "ParamVector", "init_params", "LearningPath", "TrainConfig", "load_path", "save_path",
    "train_full_batch", "__version__",
]
