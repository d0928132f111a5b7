"""Three-CNN ensemble for handwritten Japanese character recognition on a small numpy core."""
from .data import Dataset, SplitSpec, load_dataset
from .ensemble import evaluate_ensemble, evaluate_members, maxsum_vote, metrics, predict_proba
from .models import ArchSpec, Model, arch_cnn1, arch_cnn2, arch_cnn3, build_model
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train, transfer_init

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "Checkpoint",
    "Dataset",
    "Model",
    "SplitSpec",
    "TrainConfig",
    "arch_cnn1",
    "arch_cnn2",
    "arch_cnn3",
    "build_model",
    "evaluate_ensemble",
    "evaluate_members",
    "load_checkpoint",
    "load_dataset",
    "maxsum_vote",
    "metrics",
    "predict_proba",
    "save_checkpoint",
    "train",
    "transfer_init",
]
