"""Bi-temporal change detection with multi-scale feature difference fusion."""
from .checkpoint import load_checkpoint, save_checkpoint
from .datakit import PairDataset, SamplePair, SynthConfig, generate, load_dataset
from .doconv import DOConv2d, fold_module
from .estimator import ChangeDetector
from .evalkit import ConfusionCounts, MetricsReport, accumulate, binarize, compute_metrics
from .losses import SupervisionConfig, total_loss
from .network import ForwardOutputs, MFDSNet, ModelConfig, forward_full, fold_model
from .training import evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ChangeDetector", "ConfusionCounts", "DOConv2d", "ForwardOutputs", "MFDSNet", "MetricsReport",
    "ModelConfig", "PairDataset", "SamplePair", "SupervisionConfig", "SynthConfig", "accumulate",
    "binarize", "compute_metrics", "evaluate", "fold_model", "fold_module", "forward_full", "generate",
    "load_checkpoint", "load_dataset", "save_checkpoint", "total_loss", "train",
]
