"""Overlap and focal losses on probability maps.

Both losses accept soft labels in [0, 1] (mixup output) and are differentiable
through the autograd engine. The combined training loss is their plain sum.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autograd import clamp, log, tmean, tsum
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class LossConfig:
    dice_eps: float = 1e-5
    focal_alpha: float = 0.5
    focal_gamma: float = 2.0
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.focal_alpha < 1.0:
            raise ConfigurationError("focal_alpha must lie in (0, 1)")
        if self.dice_eps <= 0.0:
            raise ConfigurationError("dice_eps must be positive")
        if not 0.0 < self.prob_clamp < 0.1:
            raise ConfigurationError("prob_clamp must lie in (0, 0.1)")


def _check_shapes(pred, label):
    if pred.shape != label.shape:
        raise DimensionError(
            f"prediction {pred.shape} and label {label.shape} disagree")


def dice_loss(pred, label, cfg=LossConfig()):
    """1 - 2*sum(y*yhat) / (sum(y) + sum(yhat) + eps), over all voxels."""
    _check_shapes(pred, label)
    intersection = tsum(pred * label)
    denom = tsum(pred) + tsum(label) + cfg.dice_eps
    return 1.0 - (2.0 * intersection) / denom


def focal_loss(pred, label, cfg=LossConfig()):
    """Mean focal term; predictions are clamped away from 0 and 1 before logs.

    Per voxel: -(1-alpha)(1-y) yhat^gamma log(1-yhat)
               - alpha y (1-yhat)^gamma log(yhat).
    """
    _check_shapes(pred, label)
    p = clamp(pred, cfg.prob_clamp, 1.0 - cfg.prob_clamp)
    y = label
    pos = (y * ((1.0 - p) ** cfg.focal_gamma)) * log(p)
    neg = ((1.0 - y) * (p ** cfg.focal_gamma)) * log(1.0 - p)
    per_voxel = -(cfg.focal_alpha * pos + (1.0 - cfg.focal_alpha) * neg)
    return tmean(per_voxel)


def total_loss(pred, label, cfg=LossConfig()):
    """Dice plus focal, evaluated exactly as the two components."""
    return dice_loss(pred, label, cfg) + focal_loss(pred, label, cfg)
