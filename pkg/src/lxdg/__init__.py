"""Continual-learning engine with learned context-dependent gating."""

from .network import GatedNetParams, NetworkConfig, init_params
from .objectives import LossCoefficients, TaskAnchor
from .tasks import Dataset, TaskSpec, TaskStream, load_mnist_idx, make_task_specs
from .trainer import AccuracyMatrix, RunResult, TrainConfig, evaluate, run_sequence

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "Dataset",
    "GatedNetParams",
    "LossCoefficients",
    "NetworkConfig",
    "RunResult",
    "TaskAnchor",
    "TaskSpec",
    "TaskStream",
    "TrainConfig",
    "evaluate",
    "init_params",
    "load_mnist_idx",
    "make_task_specs",
    "run_sequence",
    "__version__",
]
