"""Segmentation head over the pretrained encoder, and overlap metrics.

The head reshapes encoder tokens to their 2D grid and upsamples with
log2(patch_size) blocks of transposed-conv (stride 2) -> 3x3 conv -> ReLU,
halving the channel count per block, then projects to single-channel pixel
logits. Evaluation binarizes logits at 0 (sigmoid 0.5).
"""

import math
from dataclasses import dataclass

import numpy as np

from vamae import autodiff as ad
from vamae.autodiff import Parameter, Tensor
from vamae.errors import ConfigError, DimensionError
from vamae.image import patchify, validate_binary
from vamae.model import ModelConfig, VamaeModel, trunc_normal


@dataclass(frozen=True)
class SegMetrics:
    dice: float
    iou: float
    precision: float
    recall: float


class _UpBlock:
    """ConvTranspose2d(k=2, s=2) -> Conv2d(3x3, same) -> ReLU."""

    def __init__(self, name, c_in, c_out, rng, dtype):
        self.c_in, self.c_out = c_in, c_out
        self.tconv_w = Parameter(
            trunc_normal(rng, (c_in, c_out, 2, 2)).astype(dtype), f"{name}.tconv.w"
        )
        self.tconv_b = Parameter(np.zeros(c_out, dtype=dtype), f"{name}.tconv.b")
        self.conv_w = Parameter(
            trunc_normal(rng, (c_out, c_out, 3, 3)).astype(dtype), f"{name}.conv.w"
        )
        self.conv_b = Parameter(np.zeros(c_out, dtype=dtype), f"{name}.conv.b")

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        # transposed conv with k=s=2: per-pixel linear map then pixel shuffle
        flat = ad.transpose(ad.reshape(x, (c, h * w)), (1, 0))  # (HW, C_in)
        w2 = ad.reshape(self.tconv_w, (self.c_in, self.c_out * 4))
        up = ad.add(ad.matmul(flat, w2), _tile4(self.tconv_b, self.c_out))
        up = ad.reshape(up, (h, w, self.c_out, 2, 2))
        up = ad.transpose(up, (2, 0, 3, 1, 4))  # (C_out, H, 2, W, 2)
        up = ad.reshape(up, (self.c_out, 2 * h, 2 * w))

        cols = ad.im2col3x3(up)  # (4HW, C_out*9)
        wc = ad.transpose(ad.reshape(self.conv_w, (self.c_out, self.c_out * 9)), (1, 0))
        out = ad.add(ad.matmul(cols, wc), self.conv_b)  # (4HW, C_out)
        out = ad.transpose(ad.reshape(out, (2 * h, 2 * w, self.c_out)), (2, 0, 1))
        return ad.relu(out)

    def params(self):
        return [self.tconv_w, self.tconv_b, self.conv_w, self.conv_b]


def _tile4(bias: Parameter, c_out: int) -> Tensor:
    """Bias for the pixel-shuffled layout: each output channel repeated 4x."""
    return ad.reshape(
        ad.repeat_rows(ad.reshape(bias, (1, c_out)), 4), (1, c_out * 4)
    )


class SegHead:
    """Upsampling decoder from the token grid to full-resolution logits."""

    def __init__(self, config: ModelConfig, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        p = config.patch_size
        n_blocks = int(math.log2(p))
        if 2**n_blocks != p:
            raise ConfigError(f"patch_size must be a power of 2 for the head, got {p}")
        self.config = config
        self.grid = config.grid
        self.blocks = []
        c_in = config.encoder_dim
        for i in range(n_blocks):
            c_out = max(1, config.encoder_dim >> (i + 1))
            self.blocks.append(_UpBlock(f"seg.block{i}", c_in, c_out, rng, dtype))
            c_in = c_out
        self.final_w = Parameter(trunc_normal(rng, (c_in, 1)).astype(dtype), "seg.final.w")
        self.final_b = Parameter(np.zeros(1, dtype=dtype), "seg.final.b")

    def __call__(self, tokens: Tensor) -> Tensor:
        rows, cols = self.grid.rows, self.grid.cols
        if tokens.shape != (rows * cols, self.config.encoder_dim):
            raise DimensionError(
                f"expected tokens ({rows * cols}, {self.config.encoder_dim}), got {tokens.shape}"
            )
        x = ad.transpose(ad.reshape(tokens, (rows, cols, self.config.encoder_dim)), (2, 0, 1))
        for blk in self.blocks:
            x = blk(x)
        c, h, w = x.shape
        flat = ad.transpose(ad.reshape(x, (c, h * w)), (1, 0))
        logits = ad.add(ad.matmul(flat, self.final_w), self.final_b)
        return ad.reshape(logits, (h, w))

    def parameters(self) -> list[Parameter]:
        out = []
        for blk in self.blocks:
            out += blk.params()
        return out + [self.final_w, self.final_b]

    def state_dict(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def load_state_dict(self, arrays: dict) -> None:
        for param in self.parameters():
            if param.name not in arrays:
                raise ConfigError(f"checkpoint missing head parameter {param.name}")
            arr = np.asarray(arrays[param.name], dtype=param.data.dtype)
            if arr.shape != param.data.shape:
                raise ConfigError(f"shape mismatch for {param.name}")
            param.data = arr.copy()


def seg_forward(image: np.ndarray, model: VamaeModel, head: SegHead) -> Tensor:
    """Full-resolution pixel logits; the encoder sees every patch (no mask)."""
    patches = patchify(image, model.config.grid)
    return head(model.forward_tokens(patches))


def binarize_logits(logits) -> np.ndarray:
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (arr > 0).astype(np.uint8)


def _counts(pred: np.ndarray, target: np.ndarray):
    p = validate_binary(pred).astype(bool)
    t = validate_binary(target).astype(bool)
    if p.shape != t.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {t.shape}")
    tp = int(np.sum(p & t))
    return tp, int(p.sum()), int(t.sum())


def dice(pred: np.ndarray, target: np.ndarray) -> float:
    """2|X n Y| / (|X| + |Y|); 1.0 when both masks are empty."""
    tp, np_, nt = _counts(pred, target)
    if np_ + nt == 0:
        return 1.0
    return 2.0 * tp / (np_ + nt)


def iou(pred: np.ndarray, target: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    tp, np_, nt = _counts(pred, target)
    union = np_ + nt - tp
    if union == 0:
        return 1.0
    return tp / union


def precision(pred: np.ndarray, target: np.ndarray) -> float:
    """TP / predicted positives; empty prediction gives 1.0 iff target empty."""
    tp, np_, nt = _counts(pred, target)
    if np_ == 0:
        return 1.0 if nt == 0 else 0.0
    return tp / np_


def recall(pred: np.ndarray, target: np.ndarray) -> float:
    """TP / target positives; empty target gives 1.0 iff prediction empty."""
    tp, np_, nt = _counts(pred, target)
    if nt == 0:
        return 1.0 if np_ == 0 else 0.0
    return tp / nt


def evaluate_pair(pred: np.ndarray, target: np.ndarray) -> SegMetrics:
    return SegMetrics(
        dice=dice(pred, target),
        iou=iou(pred, target),
        precision=precision(pred, target),
        recall=recall(pred, target),
    )
