"""Point-cloud transformer with significance-targeted key dropout.

Everything runs on numpy: a small reverse-mode autodiff, a procedural shape
dataset, a corruption suite and robustness metrics.
"""

from .corruption import KINDS, SEVERITIES, CorruptionSpec, corrupt
from .errors import ApctError
from .geometry import CLASS_NAMES, PointCloud, gen_shape
from .metrics import build_report
from .model import ModelConfig, forward, init_params, load_model, save_model
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ApctError",
    "CLASS_NAMES",
    "CorruptionSpec",
    "KINDS",
    "ModelConfig",
    "PointCloud",
    "SEVERITIES",
    "TrainConfig",
    "build_report",
    "corrupt",
    "evaluate",
    "forward",
    "gen_shape",
    "init_params",
    "load_model",
    "save_model",
    "train",
]
