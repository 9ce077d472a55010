"""Multi-task dense prediction with fine-grained mixture-of-experts routing."""

from .autodiff import (BatchNorm, Tensor, bilinear_sample, concat, conv2d,
                       gelu, layer_norm, linear, log_softmax, no_grad, pad2d,
                       relu, sigmoid, softmax, stop_gradient, upsample_nearest)
from .config import ExperimentConfig, load_config
from .data import SceneConfig, TaskSample, generate_scene, read_dataset, write_dataset
from .gradcheck import GradCheckReport, grad_check
from .model import FGMoEModel, ParamCensus, SharedMLPModel, build_model, count_params
from .moe import (GateVector, MoELayer, RoutingReport, combine, routing_stats,
                  topk_gate)
from .tasks import TaskSpec, compute_metric, delta_m, make_task_spec, task_loss, total_loss
from .train import SGD, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BatchNorm", "Tensor", "bilinear_sample", "concat", "conv2d", "gelu",
    "layer_norm", "linear", "log_softmax", "no_grad", "pad2d", "relu",
    "sigmoid", "softmax", "stop_gradient", "upsample_nearest",
    "ExperimentConfig", "load_config",
    "SceneConfig", "TaskSample", "generate_scene", "read_dataset", "write_dataset",
    "GradCheckReport", "grad_check",
    "FGMoEModel", "ParamCensus", "SharedMLPModel", "build_model", "count_params",
    "GateVector", "MoELayer", "RoutingReport", "combine", "routing_stats", "topk_gate",
    "TaskSpec", "compute_metric", "delta_m", "make_task_spec", "task_loss", "total_loss",
    "SGD", "evaluate", "train",
    "__version__",
]
