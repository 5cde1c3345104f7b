"""Binary cross-entropy, soft Dice and their weighted sum."""
from dataclasses import dataclass

import torch

from .exceptions import ConfigError, InvalidInputError

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5
    dice_smoothing: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"loss weights must be nonnegative, got {self.lambda1}, {self.lambda2}")
        if self.dice_smoothing < 0:
            raise ConfigError("dice_smoothing must be nonnegative")


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise InvalidInputError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")


def bce_loss(pred, target, mask=None, eps=BCE_EPS):
    """Mean binary cross-entropy over (optionally masked) pixels.

    ``pred`` holds probabilities; it is clamped to ``[eps, 1 - eps]``.
    """
    _check_shapes(pred, target)
    p = pred.clamp(eps, 1.0 - eps)
    ll = -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))
    if mask is not None:
        _check_shapes(pred, mask)
        ll = ll[mask > 0]
        if ll.numel() == 0:
            raise InvalidInputError("validity mask excludes every pixel")
    return ll.mean()


def dice_loss(pred, target, smoothing=1.0):
    """Soft Dice loss ``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)``.

    Sums run over each whole image: a 4-d ``(B, C, H, W)`` batch yields the
    mean of per-image losses; any other rank is treated as a single image.
    """
    _check_shapes(pred, target)
    dims = tuple(range(1, pred.dim())) if pred.dim() == 4 else tuple(range(pred.dim()))
    inter = (pred * target).sum(dim=dims)
    denom = pred.sum(dim=dims) + target.sum(dim=dims)
    return (1.0 - (2.0 * inter + smoothing) / (denom + smoothing)).mean()


def loss_terms(pred, target, weights=LossWeights(), mask=None):
    """Return ``(total, bce, dice)``; ``total`` is the weighted composite."""
    bce = bce_loss(pred, target, mask)
    dice = dice_loss(pred, target, weights.dice_smoothing)
    return weights.lambda1 * bce + weights.lambda2 * dice, bce, dice


def composite_loss(pred, target, weights=LossWeights(), mask=None):
    return loss_terms(pred, target, weights, mask)[0]
