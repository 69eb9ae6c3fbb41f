"""Grounding affordance regions in point-cloud scenes from short interaction clips."""
from .config import RunConfig, load_config
from .engine import evaluate, train
from .metrics import evaluate_dataset, filter_predictions
from .model import EgoSAG, prepare_scene

__all__ = ["EgoSAG", "RunConfig", "evaluate", "evaluate_dataset", "filter_predictions",
           "load_config", "prepare_scene", "train"]
__version__ = "0.1.0"
