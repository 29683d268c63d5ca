"""Pretraining loop, two-stage fine-tuning, and paired augmentation.

All randomness flows from a single seed through named child streams (batch
order, mask noise, augmentation), so runs are bit-reproducible in
single-threaded mode. Masks are drawn per image per step: patch scores are
image-specific and the uniform noise is resampled every forward pass.
Non-finite losses abort with a diagnostic dump rather than being skipped.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from vamae import autodiff as ad
from vamae.autodiff import Tensor, no_grad, save_checkpoint
from vamae.errors import DimensionError, NanLossError
from vamae.image import patchify
from vamae.losses import LossWeights, LrSchedule, lr_at, seg_loss, total_pretrain_loss
from vamae.masking import CurriculumSchedule, curriculum_ratio, hybrid_scores, select_mask
from vamae.model import VamaeModel
from vamae.optim import Adam, AdamW
from vamae.seg import SegHead, binarize_logits, dice, seg_forward


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 8
    peak_lr: float = 1e-4
    warmup_epochs: float = 10.0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    alpha: float = 0.6
    loss_weights: LossWeights = LossWeights()
    curriculum: CurriculumSchedule | None = None  # None: reference scaled to epochs
    ratio_override: float | None = None
    checkpoint_interval: int = 0  # epochs between checkpoints; 0 = final only
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")

    def resolved_curriculum(self) -> CurriculumSchedule:
        sched = self.curriculum or CurriculumSchedule.default(self.epochs)
        if sched.total_epochs != self.epochs:
            raise ValueError(
                f"curriculum covers {sched.total_epochs} epochs, training runs {self.epochs}"
            )
        return sched


@dataclass(frozen=True)
class FinetuneConfig:
    stage1_epochs: int = 20
    stage2_epochs: int = 80
    stage1_lr: float = 1e-4
    stage2_lr: float = 1e-5
    batch_size: int = 8
    pos_weight: float = 15.0
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValueError("both fine-tuning stages need at least one epoch")


def _mean_loss(losses):
    total = losses[0]
    for loss in losses[1:]:
        total = ad.add(total, loss)
    return ad.mul(total, 1.0 / len(losses))


def _dump_diagnostics(out_dir, payload):
    if out_dir is None:
        return
    path = Path(out_dir) / "nan_dump.json"
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def pretrain(triplets, model: VamaeModel, config: PretrainConfig, out_dir=None):
    """Masked multi-target pretraining; returns per-epoch log rows.

    `triplets` are StructureTriplets matching the model's image size.
    Writes `model_final.ckpt` (and interval checkpoints) under `out_dir`.
    """
    grid = model.config.grid
    for t in triplets:
        if t.shape != grid.image_shape:
            raise DimensionError(
                f"triplet shape {t.shape} does not match model {grid.image_shape}"
            )
    if not triplets:
        raise ValueError("empty pretraining dataset")

    curriculum = config.resolved_curriculum()
    schedule = LrSchedule(
        total_epochs=config.epochs,
        warmup_epochs=min(config.warmup_epochs, config.epochs - 1e-9),
        peak_lr=config.peak_lr,
    )
    optimizer = AdamW(
        model.parameters(),
        lr=0.0,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )

    patches_i = [patchify(t.intensity, grid) for t in triplets]
    patches_v = [patchify(t.vesselness, grid) for t in triplets]
    patches_s = [patchify(t.skeleton.astype(np.float64), grid) for t in triplets]
    density = [p.mean(axis=1) for p in patches_v]
    skeleton_presence = [(p.max(axis=1) > 0).astype(np.float64) for p in patches_s]

    order_rng, mask_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2)
    ]
    n = len(triplets)
    steps_per_epoch = math.ceil(n / config.batch_size)
    log = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(name, epoch):
        if out_dir is None:
            return
        save_checkpoint(
            out_dir / name,
            model.state_dict(),
            manifest={
                "model_config": model.config.to_dict(),
                "seed": config.seed,
                "epoch": epoch,
                "rng_state": {
                    "order": order_rng.bit_generator.state,
                    "mask": mask_rng.bit_generator.state,
                },
            },
        )

    for epoch in range(1, config.epochs + 1):
        ratio = (
            config.ratio_override
            if config.ratio_override is not None
            else curriculum_ratio(epoch, curriculum)
        )
        perm = order_rng.permutation(n)
        sums = {"total": 0.0, "intensity": 0.0, "vesselness": 0.0, "skeleton": 0.0}
        last_lr = 0.0
        for step in range(steps_per_epoch):
            batch = perm[step * config.batch_size : (step + 1) * config.batch_size]
            last_lr = lr_at(epoch - 1 + step / steps_per_epoch, schedule)
            optimizer.lr = last_lr
            optimizer.zero_grad()
            losses = []
            for idx in batch:
                scores = hybrid_scores(
                    density[idx], skeleton_presence[idx], config.alpha, mask_rng
                )
                mask = select_mask(scores, ratio)
                out = model.forward_pretrain(patches_i[idx], mask)
                loss, terms = total_pretrain_loss(
                    out,
                    patches_i[idx],
                    patches_v[idx],
                    patches_s[idx],
                    mask,
                    config.loss_weights,
                )
                losses.append(loss)
                for key in ("intensity", "vesselness", "skeleton"):
                    sums[key] += terms[key]
            batch_loss = _mean_loss(losses)
            value = batch_loss.item()
            if not np.isfinite(value):
                _dump_diagnostics(
                    out_dir,
                    {"epoch": epoch, "step": step, "loss": value, "lr": last_lr},
                )
                raise NanLossError(f"non-finite loss {value} at epoch {epoch} step {step}")
            sums["total"] += value * len(batch)
            batch_loss.backward()
            optimizer.step()
        row = {
            "epoch": epoch,
            "loss": sums["total"] / n,
            "loss_intensity": sums["intensity"] / n,
            "loss_vesselness": sums["vesselness"] / n,
            "loss_skeleton": sums["skeleton"] / n,
            "lr": last_lr,
            "mask_ratio": ratio,
        }
        log.append(row)
        if config.checkpoint_interval and epoch % config.checkpoint_interval == 0:
            checkpoint(f"model_e{epoch:04d}.ckpt", epoch)
    checkpoint("model_final.ckpt", config.epochs)
    if out_dir is not None:
        with open(out_dir / "pretrain_log.jsonl", "w") as f:
            for row in log:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    return log


# paired spatial augmentation

ROTATE_RANGE_DEG = 15.0
ELASTIC_SIGMA = 4.0
ELASTIC_MAGNITUDE = 3.0


@dataclass(frozen=True)
class AugmentParams:
    flip_h: bool
    flip_v: bool
    angle_deg: float
    disp_rows: np.ndarray | None  # elastic displacement fields, pixels
    disp_cols: np.ndarray | None

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(False, False, 0.0, None, None)


def sample_augment_params(rng, shape) -> AugmentParams:
    """Flips with p=0.5 each, rotation in +-15 deg, smoothed elastic field."""
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-ROTATE_RANGE_DEG, ROTATE_RANGE_DEG))
    disp = []
    for _ in range(2):
        raw = gaussian_filter(rng.normal(0.0, 1.0, shape), ELASTIC_SIGMA, mode="reflect")
        peak = np.abs(raw).max()
        disp.append(raw * (ELASTIC_MAGNITUDE / peak) if peak > 0 else raw)
    return AugmentParams(flip_h, flip_v, angle, disp[0], disp[1])


def apply_augment(image: np.ndarray, mask: np.ndarray, params: AugmentParams):
    """Identical spatial transform on both; mask re-binarized at 0.5."""
    img = np.asarray(image, dtype=np.float64)
    msk = np.asarray(mask, dtype=np.float64)
    if img.shape != msk.shape:
        raise DimensionError(f"image/mask shapes differ: {img.shape} vs {msk.shape}")
    if params.flip_h:
        img, msk = img[:, ::-1], msk[:, ::-1]
    if params.flip_v:
        img, msk = img[::-1, :], msk[::-1, :]

    if params.angle_deg == 0.0 and params.disp_rows is None:
        return img.copy(), (msk >= 0.5).astype(np.uint8)

    h, w = img.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    cr, cw = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(params.angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # sample source coords under the inverse rotation about the image center
    r_rel, c_rel = rr - cr, cc - cw
    src_r = cr + cos_t * r_rel - sin_t * c_rel
    src_c = cw + sin_t * r_rel + cos_t * c_rel
    if params.disp_rows is not None:
        src_r = src_r + params.disp_rows
        src_c = src_c + params.disp_cols
    coords = np.stack([src_r, src_c])
    img_out = map_coordinates(img, coords, order=1, mode="constant", cval=0.0)
    msk_out = map_coordinates(msk, coords, order=1, mode="constant", cval=0.0)
    return img_out, (msk_out >= 0.5).astype(np.uint8)


def augment(image: np.ndarray, mask: np.ndarray, rng):
    """Sample and apply one augmentation; rng-driven convenience wrapper."""
    return apply_augment(image, mask, sample_augment_params(rng, np.shape(image)))


def _validation_dice(pairs, model, head):
    scores = []
    with no_grad():
        for img, target in pairs:
            logits = seg_forward(img, model, head)
            scores.append(dice(binarize_logits(logits), target))
    return float(np.mean(scores)) if scores else math.nan


def _snapshot(params):
    return {p.name: p.data.copy() for p in params}


def _restore(params, snap):
    for p in params:
        p.data = snap[p.name].copy()


def finetune(
    train_pairs,
    val_pairs,
    model: VamaeModel,
    head: SegHead,
    config: FinetuneConfig,
    out_dir=None,
):
    """Two-stage fine-tuning: head only (encoder frozen), then joint.

    Returns per-epoch log rows; the best-validation-Dice weights are
    restored into model/head at the end and checkpointed if out_dir is set.
    """
    if not train_pairs:
        raise ValueError("empty fine-tuning dataset")
    encoder_params = model.encoder_parameters()
    head_params = head.parameters()
    aug_rng, order_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2)
    ]
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    log = []
    best = {"dice": -1.0, "params": None}
    all_params = encoder_params + head_params

    stages = (
        (1, config.stage1_epochs, config.stage1_lr, Adam(head_params, lr=config.stage1_lr)),
        (2, config.stage2_epochs, config.stage2_lr, Adam(all_params, lr=config.stage2_lr)),
    )
    epoch_global = 0
    n = len(train_pairs)
    for stage, n_epochs, lr, optimizer in stages:
        for _ in range(n_epochs):
            epoch_global += 1
            perm = order_rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, config.batch_size):
                batch = perm[start : start + config.batch_size]
                optimizer.zero_grad()
                losses = []
                for idx in batch:
                    img, target = train_pairs[idx]
                    if config.augment:
                        img, target = augment(img, target, aug_rng)
                    if stage == 1:
                        # frozen encoder: run it outside the graph entirely
                        with no_grad():
                            tokens = model.forward_tokens(patchify(img, model.config.grid))
                        logits = head(Tensor(tokens.data))
                    else:
                        logits = seg_forward(img, model, head)
                    losses.append(seg_loss(logits, target, config.pos_weight))
                batch_loss = _mean_loss(losses)
                value = batch_loss.item()
                if not np.isfinite(value):
                    _dump_diagnostics(out_dir, {"epoch": epoch_global, "loss": value})
                    raise NanLossError(f"non-finite loss at fine-tune epoch {epoch_global}")
                epoch_loss += value * len(batch)
                batch_loss.backward()
                optimizer.step()
            val_dice = _validation_dice(val_pairs, model, head)
            log.append(
                {
                    "epoch": epoch_global,
                    "stage": stage,
                    "loss": epoch_loss / n,
                    "val_dice": val_dice,
                    "lr": lr,
                }
            )
            if not val_pairs or val_dice >= best["dice"]:
                best = {"dice": val_dice, "params": _snapshot(all_params)}
    if best["params"] is not None:
        _restore(all_params, best["params"])
    if out_dir is not None:
        save_checkpoint(
            out_dir / "seg_final.ckpt",
            {p.name: p for p in all_params},
            manifest={
                "model_config": model.config.to_dict(),
                "seed": config.seed,
                "best_val_dice": best["dice"],
            },
        )
        with open(out_dir / "finetune_log.jsonl", "w") as f:
            for row in log:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    return log
