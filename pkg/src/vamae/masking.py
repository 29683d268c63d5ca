"""Patch importance scoring and mask selection.

Patches are ranked by a hybrid score blending structural importance with
uniform noise:

    w_i = alpha * (0.5 * density_i + 0.5 * skeleton_i) + (1 - alpha) * eps_i

with eps_i ~ Uniform(0,1) drawn fresh on every call, so repeated passes over
the same image see different masks. The top-k scores are masked, with k
rounded half-up from ratio * N and ties resolved to the lower patch index;
both rules make a mask a pure function of (scores, ratio).
"""

from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from vamae.errors import DimensionError
from vamae.image import PatchGrid, patchify


@dataclass(frozen=True)
class PatchScores:
    """Per-patch density, skeleton presence, and blended scores for one image."""

    density: np.ndarray
    skeleton_presence: np.ndarray
    hybrid: np.ndarray
    alpha: float


@dataclass(frozen=True)
class MaskSelection:
    """Index set of masked patches out of N."""

    masked_indices: np.ndarray  # sorted ascending, unique
    ratio: float
    total_patches: int

    @property
    def k(self) -> int:
        return len(self.masked_indices)

    def visible_indices(self) -> np.ndarray:
        visible = np.ones(self.total_patches, dtype=bool)
        visible[self.masked_indices] = False
        return np.nonzero(visible)[0]


@dataclass(frozen=True)
class CurriculumSchedule:
    """Masking-ratio stages as (start_epoch, end_epoch, ratio), 1-based inclusive."""

    stages: tuple[tuple[int, int, float], ...]

    # the 300-epoch reference curriculum: 50% / 65% / 75%
    REFERENCE: ClassVar[tuple[tuple[int, int, float], ...]] = (
        (1, 20, 0.50),
        (21, 50, 0.65),
        (51, 300, 0.75),
    )

    def __post_init__(self):
        if not self.stages:
            raise ValueError("curriculum needs at least one stage")
        prev_end = 0
        for start, end, ratio in self.stages:
            if start != prev_end + 1 or end < start:
                raise ValueError(f"stages must be contiguous and ordered: {self.stages}")
            if not 0.0 < ratio < 1.0:
                raise ValueError(f"masking ratio must be in (0, 1), got {ratio}")
            prev_end = end

    @property
    def total_epochs(self) -> int:
        return self.stages[-1][1]

    @classmethod
    def default(cls, total_epochs: int = 300) -> "CurriculumSchedule":
        """Reference curriculum, stage boundaries scaled to `total_epochs`.

        Boundaries scale proportionally (e.g. 30 epochs -> 1-2 / 3-5 / 6-30);
        stages that collapse to zero length are dropped.
        """
        if total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
        ref_total = cls.REFERENCE[-1][1]
        stages = []
        prev_end = 0
        for i, (_, end, ratio) in enumerate(cls.REFERENCE):
            scaled = round(end * total_epochs / ref_total)
            if i == len(cls.REFERENCE) - 1:
                scaled = total_epochs
            if scaled <= prev_end:
                continue
            stages.append((prev_end + 1, scaled, ratio))
            prev_end = scaled
        return cls(tuple(stages))


def patch_density(vesselness: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Mean vesselness per patch, in [0, 1]."""
    return patchify(vesselness, grid).mean(axis=1)


def patch_skeleton_presence(skeleton: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """1.0 for patches containing any skeleton pixel, else 0.0."""
    arr = np.asarray(skeleton)
    return (patchify(arr, grid).max(axis=1) > 0).astype(np.float64)


def hybrid_scores(density, skeleton_presence, alpha: float, rng) -> np.ndarray:
    """Blend structural importance with fresh uniform noise.

    `rng` only needs a `random(n)` method (e.g. numpy Generator); noise is
    drawn on every call even at alpha=1 so RNG streams stay aligned.
    """
    d = np.asarray(density, dtype=np.float64)
    s = np.asarray(skeleton_presence, dtype=np.float64)
    if d.shape != s.shape:
        raise DimensionError(f"score vectors differ in length: {d.shape} vs {s.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    eps = np.asarray(rng.random(d.shape[0]), dtype=np.float64)
    return alpha * (0.5 * d + 0.5 * s) + (1.0 - alpha) * eps


def select_mask(scores, ratio: float) -> MaskSelection:
    """Mask the round(ratio * N) highest-scoring patches.

    Rounding is half-up; ties between equal scores go to the lower index.
    """
    w = np.asarray(scores, dtype=np.float64)
    n = w.shape[0]
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"masking ratio must be in (0, 1), got {ratio}")
    if n < 2:
        raise DimensionError(f"need at least 2 patches, got {n}")
    k = int(np.floor(ratio * n + 0.5))
    order = np.argsort(-w, kind="stable")  # stable: equal scores keep index order
    masked = np.sort(order[:k])
    return MaskSelection(masked_indices=masked, ratio=ratio, total_patches=n)


def curriculum_ratio(epoch: int, schedule: CurriculumSchedule) -> float:
    """Masking ratio of the stage containing `epoch` (1-based)."""
    for start, end, ratio in schedule.stages:
        if start <= epoch <= end:
            return ratio
    raise ValueError(
        f"epoch {epoch} outside curriculum range [1, {schedule.total_epochs}]"
    )
