"""Multi-modal prompt tuning for open-world compositional zero-shot learning, at desk scale."""

from .config import ExperimentConfig, MMPTConfig, full_scale_config, toy_config
from .metrics import MetricsCurve, MetricsSummary, bias_sweep, evaluate_scores, predict_open_world, summarize
from .model import MMPT
from .scores import ScoreTable
from .space import Composition, CompositionSpace, build_space, default_space

__version__ = "0.1.0"

__all__ = [
    "Composition", "CompositionSpace", "ExperimentConfig", "MMPT", "MMPTConfig", "MetricsCurve", "MetricsSummary",
    "ScoreTable", "bias_sweep", "build_space", "default_space", "evaluate_scores", "full_scale_config",
    "predict_open_world", "summarize", "toy_config",
]
