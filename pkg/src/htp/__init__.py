"""Time-aware sequential recommendation: absolute-time profiles, item-interval
aggregation and recommendation-interval attention on a small numpy autodiff core."""

from .config import RunConfig, TrainConfig
from .dataset import InteractionLog, SplitSpec, parse_interactions, split_leave_one_out
from .evaluator import EvalConfig, evaluate
from .model import AblationConfig, HTPModel, ModelConfig
from .trainer import Trainer, train_model

__version__ = "0.1.0"

__all__ = [
    "AblationConfig",
    "EvalConfig",
    "HTPModel",
    "InteractionLog",
    "ModelConfig",
    "RunConfig",
    "SplitSpec",
    "TrainConfig",
    "Trainer",
    "evaluate",
    "parse_interactions",
    "split_leave_one_out",
    "train_model",
]
