"""Masking diagnostics, paired statistics, and the ablation runner.

The information-density diagnostic measures, per masking strategy, the mean
16-bin histogram entropy of masked intensity patches and the fraction of
masked patches containing vessel pixels. The statistical helpers (paired
t-test via an in-repo regularized incomplete beta, Cohen's d) keep the
reported numbers auditable without a stats dependency.
"""

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from vamae.data import Dataset
from vamae.errors import VamaeError
from vamae.image import PatchGrid, patchify
from vamae.losses import LossWeights
from vamae.masking import hybrid_scores, select_mask
from vamae.model import ModelConfig, VamaeModel
from vamae.seg import SegHead, binarize_logits, dice, seg_forward
from vamae.train import FinetuneConfig, PretrainConfig, finetune, pretrain

ENTROPY_BINS = 16
BONFERRONI_ALPHA = 0.01


def patch_entropy(img: np.ndarray, indices, grid: PatchGrid) -> float:
    """Mean Shannon entropy (bits) of 16-bin histograms over selected patches."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise VamaeError("patch_entropy over an empty index set")
    return float(np.mean(patch_entropy_vector(img, grid)[idx]))


def patch_entropy_vector(img: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Per-patch histogram entropy in bits, for all N patches."""
    patches = patchify(img, grid)
    bins = np.clip((patches * ENTROPY_BINS).astype(np.int64), 0, ENTROPY_BINS - 1)
    out = np.empty(grid.patch_count)
    for i in range(grid.patch_count):
        counts = np.bincount(bins[i], minlength=ENTROPY_BINS)
        p = counts[counts > 0] / counts.sum()
        out[i] = -np.sum(p * np.log2(p))
    return out


@dataclass(frozen=True)
class EntropyReport:
    """Per-alpha masking diagnostics over a dataset."""

    alphas: tuple[float, ...]
    mean_masked_entropy: dict
    vessel_fraction_masked: dict
    dataset_vessel_fraction: float  # fraction of all patches containing vessels
    mask_ratio: float
    n_images: int

    def to_table(self) -> str:
        lines = ["alpha\tmasked_entropy_bits\tmasked_vessel_fraction"]
        for a in self.alphas:
            lines.append(
                f"{a:g}\t{self.mean_masked_entropy[a]:.4f}"
                f"\t{self.vessel_fraction_masked[a]:.4f}"
            )
        lines.append(f"# dataset vessel-patch fraction: {self.dataset_vessel_fraction:.4f}")
        return "\n".join(lines)


def masking_diagnostic(
    triplets,
    alphas=(0.0, 0.4, 0.6, 0.8, 1.0),
    patch_size: int = 8,
    ratio: float = 0.75,
    draws: int = 10,
    seed: int = 0,
) -> EntropyReport:
    """Compare masking strategies across a blend-weight grid."""
    triplets = list(triplets)
    if not triplets:
        raise VamaeError("masking diagnostic needs at least one triplet")
    rng = np.random.default_rng(seed)
    entropy_sum = {a: 0.0 for a in alphas}
    vessel_sum = {a: 0.0 for a in alphas}
    count = {a: 0 for a in alphas}
    base_fraction = 0.0

    for t in triplets:
        grid = PatchGrid.for_image(*t.shape, patch_size)
        entropies = patch_entropy_vector(t.intensity, grid)
        has_vessel = patchify(t.vessel_mask, grid).max(axis=1) > 0
        density = patchify(t.vesselness, grid).mean(axis=1)
        skeleton = (patchify(t.skeleton, grid).max(axis=1) > 0).astype(np.float64)
        base_fraction += has_vessel.mean()
        for a in alphas:
            for _ in range(draws):
                mask = select_mask(hybrid_scores(density, skeleton, a, rng), ratio)
                entropy_sum[a] += entropies[mask.masked_indices].mean()
                vessel_sum[a] += has_vessel[mask.masked_indices].mean()
                count[a] += 1

    return EntropyReport(
        alphas=tuple(alphas),
        mean_masked_entropy={a: entropy_sum[a] / count[a] for a in alphas},
        vessel_fraction_masked={a: vessel_sum[a] / count[a] for a in alphas},
        dataset_vessel_fraction=base_fraction / len(triplets),
        mask_ratio=ratio,
        n_images=len(triplets),
    )


# Student-t machinery: two-sided p = I_{v/(v+t^2)}(v/2, 1/2)

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise VamaeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """P(|T_df| >= |t|) via the incomplete-beta identity."""
    if df < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def paired_t_test(a, b) -> float:
    """Two-sided paired t-test p-value.

    Zero-variance differences are degenerate: identical samples report
    p = 1.0, a constant nonzero difference reports p = 0.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired t-test needs two equal-length vectors, n >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 1.0 if d[0] == 0.0 else 0.0
    t = d.mean() / (sd / math.sqrt(d.size))
    return student_t_two_sided_p(float(t), d.size - 1)


def cohens_d(a, b) -> float:
    """Standardized mean difference with the pooled standard deviation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("Cohen's d needs at least 2 samples per group")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    pooled = math.sqrt(((a.size - 1) * va + (b.size - 1) * vb) / (a.size + b.size - 2))
    diff = a.mean() - b.mean()
    if pooled == 0.0:
        if diff == 0.0:
            return 0.0
        raise VamaeError("zero pooled variance with unequal means")
    return diff / pooled


# ablation suites

@dataclass(frozen=True)
class AblationCell:
    """One configuration row of an ablation table."""

    label: str
    alpha: float
    weights: LossWeights


BASELINE_CELL = AblationCell("Pure random (baseline)", 0.0, LossWeights(1.0, 0.0, 0.0))

ALPHA_SUITE = (
    BASELINE_CELL,
    AblationCell("alpha=0.4", 0.4, LossWeights()),
    AblationCell("alpha=0.6", 0.6, LossWeights()),
    AblationCell("alpha=0.8", 0.8, LossWeights()),
    AblationCell("alpha=1.0", 1.0, LossWeights()),
)

TARGET_SUITE = (
    BASELINE_CELL,
    AblationCell("I+V+S", 0.6, LossWeights()),
    AblationCell("I+V (- skeleton)", 0.6, LossWeights(0.3, 0.5, 0.0)),
    AblationCell("I+S (- vesselness)", 0.6, LossWeights(0.3, 0.0, 0.2)),
    AblationCell("I only", 0.6, LossWeights(1.0, 0.0, 0.0)),
)

HEADLINE_SUITE = (
    BASELINE_CELL,
    AblationCell("vessel-aware I+V+S", 0.6, LossWeights()),
)

SUITES = {"alpha-sweep": ALPHA_SUITE, "target-ablation": TARGET_SUITE, "headline": HEADLINE_SUITE}


@dataclass(frozen=True)
class ExperimentRow:
    label: str
    per_seed: tuple[float, ...]
    mean: float
    std: float
    delta_vs_baseline: float
    p_value: float | None
    cohens_d: float | None
    significant: bool | None


@dataclass(frozen=True)
class ExperimentReport:
    suite: str
    baseline_label: str
    rows: tuple[ExperimentRow, ...]
    bonferroni_alpha: float = BONFERRONI_ALPHA
    errors: tuple[str, ...] = ()

    def to_table(self) -> str:
        lines = ["configuration\tmean_dice\tstd\tdelta\tp_value\tcohens_d\tsignificant"]
        for r in self.rows:
            p = "-" if r.p_value is None else f"{r.p_value:.4g}"
            d = "-" if r.cohens_d is None else f"{r.cohens_d:.3f}"
            sig = "-" if r.significant is None else ("*" if r.significant else "")
            lines.append(
                f"{r.label}\t{r.mean:.4f}\t{r.std:.4f}\t{r.delta_vs_baseline:+.4f}\t{p}\t{d}\t{sig}"
            )
        for err in self.errors:
            lines.append(f"# error: {err}")
        return "\n".join(lines)


def _cell_key(dataset_root, model_config, pre_cfg, ft_cfg, cell, seed):
    payload = {
        "dataset": str(dataset_root),
        "model": model_config.to_dict(),
        "pretrain": {
            "epochs": pre_cfg.epochs,
            "batch_size": pre_cfg.batch_size,
            "peak_lr": pre_cfg.peak_lr,
            "warmup_epochs": pre_cfg.warmup_epochs,
            "ratio_override": pre_cfg.ratio_override,
        },
        "finetune": {
            "stage1_epochs": ft_cfg.stage1_epochs,
            "stage2_epochs": ft_cfg.stage2_epochs,
            "stage1_lr": ft_cfg.stage1_lr,
            "stage2_lr": ft_cfg.stage2_lr,
            "batch_size": ft_cfg.batch_size,
            "pos_weight": ft_cfg.pos_weight,
            "augment": ft_cfg.augment,
        },
        "cell": {
            "label": cell.label,
            "alpha": cell.alpha,
            "weights": [cell.weights.intensity, cell.weights.vesselness, cell.weights.skeleton],
        },
        "seed": seed,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def run_cell(
    dataset: Dataset,
    model_config: ModelConfig,
    pre_cfg: PretrainConfig,
    ft_cfg: FinetuneConfig,
    cell: AblationCell,
    seed: int,
) -> float:
    """Pretrain + fine-tune + test-set evaluation for one (cell, seed)."""
    dataset.require_triplets()
    split = dataset.split
    triplets = [dataset.triplets[i] for i in split.train]
    train_pairs = [(dataset.images[i], dataset.labels[i]) for i in split.labeled]
    val_pairs = [(dataset.images[i], dataset.labels[i]) for i in split.val]

    model = VamaeModel(model_config, rng=np.random.default_rng((seed, 0)))
    head = SegHead(model_config, rng=np.random.default_rng((seed, 1)))
    pre = replace(pre_cfg, alpha=cell.alpha, loss_weights=cell.weights, seed=seed)
    pretrain(triplets, model, pre)
    finetune(train_pairs, val_pairs, model, head, replace(ft_cfg, seed=seed))

    scores = []
    for i in split.test:
        logits = seg_forward(dataset.images[i], model, head)
        scores.append(dice(binarize_logits(logits), dataset.labels[i]))
    return float(np.mean(scores))


def run_ablation(
    suite: str,
    dataset: Dataset,
    model_config: ModelConfig,
    pre_cfg: PretrainConfig,
    ft_cfg: FinetuneConfig,
    seeds,
    out_dir=None,
) -> ExperimentReport:
    """Run a full suite across seeds, caching completed cells on disk.

    Failed cells are recorded and skipped in aggregation; the suite never
    aborts on a single cell.
    """
    if suite not in SUITES:
        raise VamaeError(f"unknown ablation suite {suite!r}; options: {sorted(SUITES)}")
    cells = SUITES[suite]
    seeds = list(seeds)
    cache_dir = None
    if out_dir is not None:
        cache_dir = Path(out_dir) / "cells"
        cache_dir.mkdir(parents=True, exist_ok=True)

    results: dict[str, list[float]] = {c.label: [] for c in cells}
    errors = []
    for cell in cells:
        for seed in seeds:
            key = _cell_key(dataset.root, model_config, pre_cfg, ft_cfg, cell, seed)
            cache_file = cache_dir / f"{key}.json" if cache_dir else None
            record = None
            if cache_file is not None and cache_file.exists():
                record = json.loads(cache_file.read_text())
            if record is None:
                try:
                    record = {"label": cell.label, "seed": seed,
                              "dice": run_cell(dataset, model_config, pre_cfg, ft_cfg, cell, seed)}
                except Exception as err:  # cell failures must not abort the suite
                    record = {"label": cell.label, "seed": seed, "error": str(err)}
                if cache_file is not None:
                    cache_file.write_text(json.dumps(record, sort_keys=True))
            if "error" in record:
                errors.append(f"{cell.label} seed={seed}: {record['error']}")
            else:
                results[cell.label].append(record["dice"])

    baseline_label = cells[0].label
    baseline = results[baseline_label]
    rows = []
    n_tests = max(1, sum(1 for c in cells[1:] if results[c.label]))
    for cell in cells:
        vals = results[cell.label]
        if not vals:
            continue
        mean = float(np.mean(vals))
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        if cell.label == baseline_label or len(vals) != len(baseline) or len(vals) < 2:
            p = d = sig = None
            delta = 0.0 if cell.label == baseline_label else mean - float(np.mean(baseline))
        else:
            delta = mean - float(np.mean(baseline))
            p = paired_t_test(vals, baseline)
            try:
                d = cohens_d(vals, baseline)
            except VamaeError:
                d = None
            sig = p < BONFERRONI_ALPHA / n_tests
        rows.append(
            ExperimentRow(cell.label, tuple(vals), mean, std, delta, p, d, sig)
        )
    report = ExperimentReport(
        suite=suite, baseline_label=baseline_label, rows=tuple(rows), errors=tuple(errors)
    )
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / f"{suite}.tsv").write_text(report.to_table() + "\n")
    return report
