"""Stream-based active learning for network flow classification."""

from flowal.core import (
    ConfusionMatrix,
    Dataset,
    FeatureVector,
    FlowalError,
    FlowRecord,
    Label,
    LabeledExample,
    LabelSet,
    MetricsRecord,
    ModelSnapshot,
    Provenance,
)
from flowal.engine import Engine, LoopConfig, run_loop, run_side_by_side
from flowal.evaluation import compute_metrics
from flowal.kernels import BACKEND
from flowal.model import EnsembleConfig, TreeEnsemble, train
from flowal.strategy import Strategy, StrategyConfig

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfusionMatrix",
    "Dataset",
    "Engine",
    "EnsembleConfig",
    "FeatureVector",
    "FlowRecord",
    "FlowalError",
    "Label",
    "LabelSet",
    "LabeledExample",
    "LoopConfig",
    "MetricsRecord",
    "ModelSnapshot",
    "Provenance",
    "Strategy",
    "StrategyConfig",
    "TreeEnsemble",
    "compute_metrics",
    "run_loop",
    "run_side_by_side",
    "train",
]
