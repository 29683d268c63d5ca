"""Pretraining and segmentation losses, plus the learning-rate schedule.

Masked reconstruction losses average only over masked patches; visible
patches contribute exactly zero, including zero gradient. The squared-error
term uses the per-pixel mean inside each patch so all three terms share a
per-pixel scale and the 0.3/0.5/0.2 blend stays meaningful.
"""

from dataclasses import dataclass

import numpy as np

from vamae import autodiff as ad
from vamae.autodiff import Tensor
from vamae.errors import EmptyMaskError
from vamae.masking import MaskSelection
from vamae.model import PretrainOutput

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Blend weights for the three reconstruction targets."""

    intensity: float = 0.3
    vesselness: float = 0.5
    skeleton: float = 0.2

    def __post_init__(self):
        if min(self.intensity, self.vesselness, self.skeleton) < 0:
            raise ValueError(f"loss weights must be >= 0: {self}")


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to peak_lr, then half-cosine decay to the floor."""

    total_epochs: int
    warmup_epochs: float = 10.0
    peak_lr: float = 1e-4
    floor: float = 0.0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError(f"peak_lr must be > 0, got {self.peak_lr}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(
                f"need 0 <= warmup ({self.warmup_epochs}) < total ({self.total_epochs})"
            )


def lr_at(fractional_epoch: float, schedule: LrSchedule) -> float:
    """Learning rate at a (possibly fractional) epoch in [0, total_epochs]."""
    t = float(fractional_epoch)
    if t < 0 or t > schedule.total_epochs:
        raise ValueError(f"epoch {t} outside [0, {schedule.total_epochs}]")
    if t < schedule.warmup_epochs:
        return schedule.peak_lr * t / schedule.warmup_epochs
    span = schedule.total_epochs - schedule.warmup_epochs
    progress = (t - schedule.warmup_epochs) / span
    cos = 0.5 * (1.0 + np.cos(np.pi * progress))
    return schedule.floor + (schedule.peak_lr - schedule.floor) * cos


def _masked_rows(pred: Tensor, target: np.ndarray, mask: MaskSelection):
    if mask.k < 1:
        raise EmptyMaskError("loss over an empty masked set")
    pred_m = ad.take_rows(pred, mask.masked_indices)
    target_m = Tensor(np.asarray(target, dtype=pred.data.dtype)[mask.masked_indices])
    return pred_m, target_m


def masked_mse(pred: Tensor, target: np.ndarray, mask: MaskSelection) -> Tensor:
    """Mean over masked patches of the per-pixel mean squared error."""
    pred_m, target_m = _masked_rows(pred, target, mask)
    return ad.mean(ad.square(ad.sub(pred_m, target_m)))


def masked_bce(pred_logits: Tensor, target: np.ndarray, mask: MaskSelection) -> Tensor:
    """Mean binary cross-entropy over masked patches, from logits.

    Targets may be soft (values in [0, 1]).
    """
    pred_m, target_m = _masked_rows(pred_logits, target, mask)
    one = Tensor(np.asarray(1.0, dtype=pred_m.data.dtype))
    pos = ad.mul(target_m, ad.softplus(ad.neg(pred_m)))
    neg = ad.mul(ad.sub(one, target_m), ad.softplus(pred_m))
    return ad.mean(ad.add(pos, neg))


def total_pretrain_loss(
    output: PretrainOutput,
    intensity_target: np.ndarray,
    vesselness_target: np.ndarray,
    skeleton_target: np.ndarray,
    mask: MaskSelection,
    weights: LossWeights | None = None,
):
    """Weighted sum of the three masked reconstruction losses.

    The vesselness target is the continuous map in [0, 1]; the skeleton
    target is binary. Returns (total, per-term floats dict).
    """
    weights = weights or LossWeights()
    li = masked_mse(output.pred_intensity, intensity_target, mask)
    lv = masked_bce(output.pred_vesselness, vesselness_target, mask)
    ls = masked_bce(output.pred_skeleton, skeleton_target, mask)
    total = ad.add(
        ad.add(ad.mul(li, weights.intensity), ad.mul(lv, weights.vesselness)),
        ad.mul(ls, weights.skeleton),
    )
    terms = {"intensity": li.item(), "vesselness": lv.item(), "skeleton": ls.item()}
    return total, terms


def seg_loss(pred_logits: Tensor, target: np.ndarray, pos_weight: float = 15.0) -> Tensor:
    """Class-weighted pixel BCE plus soft Dice loss.

    BCE weights the positive-class term by `pos_weight`; Dice loss is
    1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps) with sigmoid
    probabilities and eps guarding empty masks.
    """
    if pos_weight <= 0:
        raise ValueError(f"pos_weight must be > 0, got {pos_weight}")
    dtype = pred_logits.data.dtype
    t = Tensor(np.asarray(target, dtype=dtype))
    one = Tensor(np.asarray(1.0, dtype=dtype))

    pos = ad.mul(ad.mul(t, ad.softplus(ad.neg(pred_logits))), pos_weight)
    neg = ad.mul(ad.sub(one, t), ad.softplus(pred_logits))
    bce = ad.mean(ad.add(pos, neg))

    probs = ad.sigmoid(pred_logits)
    inter = ad.tensor_sum(ad.mul(probs, t))
    denom = ad.add(ad.tensor_sum(probs), ad.tensor_sum(t))
    dice = ad.div(ad.add(ad.mul(inter, 2.0), DICE_EPS), ad.add(denom, DICE_EPS))
    return ad.add(bce, ad.sub(one, dice))
