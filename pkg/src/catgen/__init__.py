"""Categorical generative models: argmax flows and multinomial diffusion, in numpy."""

from .density import ArgmaxFlow, FlowModel
from .diffusion import DiffusionModel
from .schedule import NoiseSchedule, build_schedule
from .train_eval import Checkpoint, TrainConfig, evaluate, train

__all__ = [
    "ArgmaxFlow",
    "Checkpoint",
    "DiffusionModel",
    "FlowModel",
    "NoiseSchedule",
    "TrainConfig",
    "build_schedule",
    "evaluate",
    "train",
]
__version__ = "0.1.0"
