"""Combined zeroth/first-order flatness optimization for class-incremental
learning, on a small exact-HVP autodiff engine."""

from .autodiff import CompGraph, fd_gradient_oracle, gradient, hvp
from .continual import Trainer, TrainerConfig, build_stream
from .data import Dataset, SyntheticSpec, gen_gaussian_classes
from .model import ExpandableModel, MlpClassifier, MlpSpec
from .optim import CFlatConfig, cflat_step, sam_step, schedule, sgd_step
from .params import ParamVector

__version__ = "0.1.0"

__all__ = [
    "CFlatConfig",
    "CompGraph",
    "Dataset",
    "ExpandableModel",
    "MlpClassifier",
    "MlpSpec",
    "ParamVector",
    "SyntheticSpec",
    "Trainer",
    "TrainerConfig",
    "build_stream",
    "cflat_step",
    "fd_gradient_oracle",
    "gen_gaussian_classes",
    "gradient",
    "hvp",
    "sam_step",
    "schedule",
    "sgd_step",
    "__version__",
]
