"""wavetag: raw-waveform multi-label audio tagging, desk-scale end to end.

A 1D residual front-end reads the waveform, its channel axis is stood up
as the height of a one-channel image, a 2D bottleneck residual back-end
classifies it, and multi-level attention heads (after back-end stages 2,
3, and 4) are fused by averaging. Training uses the mix-training recipe:
pretrain on convex waveform mixes with union labels, then fine-tune on
raw clips at a lower learning rate.
"""

from . import audio_io, checkpoint, dataset, diffops, metrics, model, training
from .audio_io import Waveform, prepare_clip, read_wav, write_wav
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, RunConfigError
from .dataset import BalancedSampler, ClipRecord, LabelVocabulary, load_manifest, make_toy_dataset
from .metrics import MetricsReport, average_precision, compute_metrics, d_prime, evaluate_model, roc_auc
from .model import ModelConfig, WaveTagModel, toy_config
from .training import ClipStore, TrainConfig, TrainReport, run_training

__version__ = "0.1.0"

__all__ = [
    "audio_io", "checkpoint", "dataset", "diffops", "metrics", "model", "training",
    "Waveform", "prepare_clip", "read_wav", "write_wav",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "RunConfig", "RunConfigError",
    "BalancedSampler", "ClipRecord", "LabelVocabulary", "load_manifest", "make_toy_dataset",
    "MetricsReport", "average_precision", "compute_metrics", "d_prime", "evaluate_model", "roc_auc",
    "ModelConfig", "WaveTagModel", "toy_config",
    "ClipStore", "TrainConfig", "TrainReport", "run_training",
    "__version__",
]
