"""Blur-robust video face matching: synthetic corpus, two-stream blur
simulation, a trunk-branch embedding network trained in stages, and
video matching protocols with ROC reporting."""

from .errors import VideofaceError
from .evaluate import EvalReport, run_protocol
from .model import Network, load_preset
from .tensor import Tensor
from .trainer import TrainData, Trainer, TrainPlan, desk_plan

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "Network",
    "Tensor",
    "TrainData",
    "TrainPlan",
    "Trainer",
    "VideofaceError",
    "desk_plan",
    "load_preset",
    "run_protocol",
    "__version__",
]
