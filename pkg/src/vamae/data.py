"""Synthetic curvilinear-tube imagery, dataset layout, and split management.

Images contain a handful of smooth random-walk tubes (optionally branched),
rendered brighter than the background with anti-aliased edges, lightly
blurred, and corrupted with additive Gaussian noise. Ground truth is the
pre-noise tube support: the set of pixels within half a tube width of a
centerline, equivalently the half-intensity level set of the noiseless
render. Generation is deterministic per (seed, image index).

Dataset directory layout::

    images/<id>.png      labels/<id>.png
    priors/<id>_V.png    priors/<id>_Vbin.png    priors/<id>_S.png
    splits.txt           # "<id>\t<split>\t<labeled 0|1>" per line
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from vamae.errors import DimensionError, VamaeError
from vamae.image import read_binary_png, read_png, write_binary_png, write_png
from vamae.priors import FrangiParams, StructureTriplet, compute_triplet


@dataclass(frozen=True)
class SynthConfig:
    """Generator parameters; defaults land ~10-20% vessel pixels at 64x64."""

    image_size: int = 64
    n_images: int = 200
    vessel_count: tuple[int, int] = (2, 4)
    width_range: tuple[float, float] = (2.0, 5.0)
    branch_probability: float = 0.3
    background_noise_std: float = 0.08
    blur_sigma: float = 0.6
    background_level: float = 0.10
    brightness_range: tuple[float, float] = (0.60, 0.95)
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError(f"image_size too small: {self.image_size}")
        if self.vessel_count[0] < 1 or self.vessel_count[0] > self.vessel_count[1]:
            raise ValueError(f"bad vessel_count range {self.vessel_count}")
        if self.width_range[0] < 1.0 or self.width_range[0] > self.width_range[1]:
            raise ValueError(f"bad width_range {self.width_range}")
        if not 0.0 <= self.branch_probability <= 1.0:
            raise ValueError(f"bad branch_probability {self.branch_probability}")


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/val/test ids plus the labeled subset of train."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    labeled: tuple[str, ...]
    label_fraction: float

    def __post_init__(self):
        all_ids = self.train + self.val + self.test
        if len(set(all_ids)) != len(all_ids):
            raise ValueError("splits overlap or contain duplicate ids")
        if not set(self.labeled) <= set(self.train):
            raise ValueError("labeled ids must be a subset of the training split")


def _walk_centerline(rng, size, start, direction, n_steps, step=0.5, turn_std=0.09):
    """Smooth random walk; stops a couple of pixels outside the frame."""
    pts = np.empty((n_steps, 2))
    pos = np.array(start, dtype=np.float64)
    angle = direction
    count = 0
    for i in range(n_steps):
        pts[i] = pos
        count += 1
        angle += rng.normal(0.0, turn_std)
        pos = pos + step * np.array([math.sin(angle), math.cos(angle)])
        if not (-2.0 <= pos[0] <= size + 2.0 and -2.0 <= pos[1] <= size + 2.0):
            break
    return pts[:count], angle


def _tube_centerline(rng, size, n_steps):
    """Anchor in the central region, walk both ways until leaving the frame."""
    anchor = rng.uniform(0.15 * size, 0.85 * size, size=2)
    direction = rng.uniform(0.0, 2.0 * math.pi)
    fwd, _ = _walk_centerline(rng, size, anchor, direction, n_steps)
    back, _ = _walk_centerline(rng, size, anchor, direction + math.pi, n_steps)
    return np.concatenate([back[::-1], fwd[1:]]) if len(fwd) > 1 else back[::-1], direction


def _render_tubes(rng, config: SynthConfig):
    """Returns (noiseless tube layer in [0,1], binary ground truth)."""
    size = config.image_size
    n_tubes = int(rng.integers(config.vessel_count[0], config.vessel_count[1] + 1))
    yy, xx = np.mgrid[0:size, 0:size]
    pixels = np.column_stack([yy.ravel(), xx.ravel()]).astype(np.float64)
    layer = np.zeros((size, size))
    truth = np.zeros((size, size), dtype=np.uint8)
    max_steps = 4 * size

    segments = []
    for _ in range(n_tubes):
        start, direction = _tube_start(rng, size)
        width = rng.uniform(*config.width_range)
        pts, _ = _walk_centerline(rng, size, start, direction, max_steps)
        segments.append((pts, width))
        if rng.random() < config.branch_probability and len(pts) > 8:
            at = int(rng.integers(len(pts) // 4, 3 * len(pts) // 4))
            turn = rng.choice([-1.0, 1.0]) * rng.uniform(0.4, 1.1)
            bpts, _ = _walk_centerline(
                rng, size, pts[at], direction + turn, max_steps // 2
            )
            segments.append((bpts, max(config.width_range[0], 0.7 * width)))

    for pts, width in segments:
        brightness = rng.uniform(*config.brightness_range)
        dist = cKDTree(pts).query(pixels)[0].reshape(size, size)
        coverage = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)  # anti-aliased edge
        np.maximum(layer, coverage * brightness, out=layer)
        truth |= dist <= width / 2.0

    return layer, truth


def generate_image(config: SynthConfig, index: int):
    """One (image, ground-truth mask) pair, deterministic in (seed, index)."""
    rng = np.random.default_rng((config.seed, index))
    layer, truth = _render_tubes(rng, config)
    img = np.maximum(config.background_level, layer)
    if config.blur_sigma > 0:
        img = gaussian_filter(img, config.blur_sigma, mode="reflect")
    if config.background_noise_std > 0:
        img = img + rng.normal(0.0, config.background_noise_std, img.shape)
    return np.clip(img, 0.0, 1.0), truth


def generate_synthetic(config: SynthConfig):
    """All (image, mask) pairs for the configured dataset."""
    return [generate_image(config, i) for i in range(config.n_images)]


def make_splits(ids, ratios, label_fraction: float = 1.0, seed: int = 0) -> DatasetSplit:
    """Deterministic shuffle + partition; labels subsample the train split only."""
    ids = [str(i) for i in ids]
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError(f"ratios must be 3 values summing to 1, got {ratios}")
    if not 0.0 < label_fraction <= 1.0:
        raise ValueError(f"label_fraction must be in (0, 1], got {label_fraction}")
    n = len(ids)
    n_train = int(np.floor(ratios[0] * n + 0.5))
    n_val = int(np.floor(ratios[1] * n + 0.5))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise VamaeError(
            f"split sizes ({n_train}/{n_val}/{n_test}) round to an empty split"
        )
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    train = tuple(shuffled[:n_train])
    val = tuple(shuffled[n_train : n_train + n_val])
    test = tuple(shuffled[n_train + n_val :])
    n_labeled = max(1, int(np.floor(label_fraction * n_train + 0.5)))
    return DatasetSplit(
        train=train,
        val=val,
        test=test,
        labeled=tuple(sorted(train[:n_labeled])),
        label_fraction=label_fraction,
    )


def write_splits(path, split: DatasetSplit) -> None:
    labeled = set(split.labeled)
    with open(path, "w") as f:
        for name, ids in (("train", split.train), ("val", split.val), ("test", split.test)):
            for i in ids:
                flag = 1 if name == "train" and i in labeled else 0
                f.write(f"{i}\t{name}\t{flag}\n")


def read_splits(path) -> DatasetSplit:
    buckets = {"train": [], "val": [], "test": []}
    labeled = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            img_id, name, flag = line.split("\t")
            if name not in buckets:
                raise VamaeError(f"unknown split name {name!r} in {path}")
            buckets[name].append(img_id)
            if flag == "1":
                labeled.append(img_id)
    n_train = len(buckets["train"])
    frac = len(labeled) / n_train if n_train else 1.0
    return DatasetSplit(
        train=tuple(buckets["train"]),
        val=tuple(buckets["val"]),
        test=tuple(buckets["test"]),
        labeled=tuple(sorted(labeled)),
        label_fraction=frac,
    )


def image_id(index: int) -> str:
    return f"img_{index:04d}"


def write_dataset(
    out_dir,
    config: SynthConfig,
    split_ratios=(0.64, 0.16, 0.20),
    label_fraction: float = 1.0,
    frangi: FrangiParams | None = None,
    with_priors: bool = True,
) -> DatasetSplit:
    """Generate and write the full on-disk layout, priors included."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    if with_priors:
        (out / "priors").mkdir(exist_ok=True)
    ids = []
    for i in range(config.n_images):
        img, mask = generate_image(config, i)
        img_id = image_id(i)
        ids.append(img_id)
        write_png(out / "images" / f"{img_id}.png", img)
        write_binary_png(out / "labels" / f"{img_id}.png", mask)
        if with_priors:
            triplet = compute_triplet(img, frangi)
            write_prior_files(out / "priors", img_id, triplet)
    split = make_splits(ids, split_ratios, label_fraction, config.seed)
    write_splits(out / "splits.txt", split)
    return split


def write_prior_files(prior_dir, img_id: str, triplet: StructureTriplet) -> None:
    prior_dir = Path(prior_dir)
    write_png(prior_dir / f"{img_id}_V.png", triplet.vesselness)
    write_binary_png(prior_dir / f"{img_id}_Vbin.png", triplet.vessel_mask)
    write_binary_png(prior_dir / f"{img_id}_S.png", triplet.skeleton)


@dataclass
class Dataset:
    """In-memory dataset: images, labels, priors, and the split."""

    root: Path
    split: DatasetSplit
    images: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    triplets: dict = field(default_factory=dict)

    def require_triplets(self):
        if not self.triplets:
            raise VamaeError(
                f"no priors found under {self.root}; run the preprocess step first"
            )


def load_dataset(root, need_priors: bool = True) -> Dataset:
    """Read the on-disk layout back into memory."""
    root = Path(root)
    splits_path = root / "splits.txt"
    if not splits_path.exists():
        raise VamaeError(f"{splits_path} not found; not a dataset directory")
    split = read_splits(splits_path)
    ds = Dataset(root=root, split=split)
    for img_id in split.train + split.val + split.test:
        img = read_png(root / "images" / f"{img_id}.png")
        ds.images[img_id] = img
        label_path = root / "labels" / f"{img_id}.png"
        if label_path.exists():
            label = read_binary_png(label_path)
            if label.shape != img.shape:
                raise DimensionError(f"label/image shape mismatch for {img_id}")
            ds.labels[img_id] = label
        v_path = root / "priors" / f"{img_id}_V.png"
        if need_priors and v_path.exists():
            ds.triplets[img_id] = StructureTriplet(
                intensity=img,
                vesselness=read_png(v_path),
                vessel_mask=read_binary_png(root / "priors" / f"{img_id}_Vbin.png"),
                skeleton=read_binary_png(root / "priors" / f"{img_id}_S.png"),
            )
    return ds
