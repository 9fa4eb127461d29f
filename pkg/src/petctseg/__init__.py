"""Volumetric PET-CT tumor segmentation on a small numpy autograd engine.

The package covers the full loop at desk scale: synthetic dual-modality
phantoms, preprocessing and augmentation, a dual-branch attention U-Net with
reverse-mode gradients, overlap/boundary metrics with brute-force oracles,
and a deterministic training harness with checkpointing and ablations.
"""

from .autograd import Tape, Tensor, backward, gradcheck
from .losses import LossConfig, dice_loss, focal_loss, total_loss
from .metrics import MetricsReport, assd, evaluate_case, hausdorff
from .model import ModelConfig, init_weights, model_forward, parameter_count
from .phantom import PhantomSpec, gen_dataset, gen_phantom
from .preprocess import AugmentPolicy, augment, mixup, preprocess_case
from .trainer import (Checkpoint, TrainConfig, load_checkpoint,
                      save_checkpoint, train, train_crossval)
from .volume import Case, Volume, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy", "Case", "Checkpoint", "LossConfig", "MetricsReport",
    "ModelConfig", "PhantomSpec", "Tape", "Tensor", "TrainConfig", "Volume",
    "assd", "augment", "backward", "dice_loss", "evaluate_case",
    "focal_loss", "gen_dataset", "gen_phantom", "gradcheck", "hausdorff",
    "init_weights", "load_checkpoint", "mixup", "model_forward",
    "parameter_count", "preprocess_case", "read_volume", "save_checkpoint",
    "total_loss", "train", "train_crossval", "write_volume",
]
