import numpy as np
import pytest
from oracles import count_components_8

from vamae.data import (
    Dataset,
    DatasetSplit,
    SynthConfig,
    generate_image,
    generate_synthetic,
    image_id,
    load_dataset,
    make_splits,
    read_splits,
    write_dataset,
    write_splits,
)
from vamae.errors import VamaeError


class TestGenerator:
    def test_deterministic(self):
        cfg = SynthConfig(image_size=48, seed=42)
        a_img, a_mask = generate_image(cfg, 3)
        b_img, b_mask = generate_image(cfg, 3)
        assert np.array_equal(a_img, b_img)
        assert np.array_equal(a_mask, b_mask)
        c_img, _ = generate_image(cfg, 4)
        assert not np.array_equal(a_img, c_img)

    def test_values_in_range(self):
        img, mask = generate_image(SynthConfig(image_size=48, seed=7), 0)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert set(np.unique(mask)) <= {0, 1}

    def test_noiseless_single_tube_truth_is_half_level_set(self):
        cfg = SynthConfig(
            image_size=48,
            vessel_count=(1, 1),
            branch_probability=0.0,
            background_noise_std=0.0,
            blur_sigma=0.0,
            background_level=0.1,
            brightness_range=(1.0, 1.0),
            seed=9,
        )
        img, truth = generate_image(cfg, 0)
        assert np.array_equal((img >= 0.5).astype(np.uint8), truth)

    def test_mean_foreground_fraction_in_band(self):
        cfg = SynthConfig(image_size=64, seed=0, n_images=100)
        fractions = [m.mean() for _, m in generate_synthetic(cfg)]
        assert 0.05 <= np.mean(fractions) <= 0.25

    def test_tubes_are_connected(self):
        cfg = SynthConfig(
            image_size=48, vessel_count=(1, 1), branch_probability=0.0, seed=5
        )
        for i in range(10):
            mask = generate_image(cfg, i)[1]
            assert count_components_8(mask) == 1

    def test_vessels_brighter_than_background(self):
        img, mask = generate_image(SynthConfig(image_size=64, seed=12), 0)
        assert img[mask > 0].mean() > img[mask == 0].mean() + 0.2

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(vessel_count=(3, 1))
        with pytest.raises(ValueError):
            SynthConfig(width_range=(0.2, 3.0))


class TestSplits:
    def test_exact_counts_200(self):
        split = make_splits([image_id(i) for i in range(200)], (0.64, 0.16, 0.20))
        assert (len(split.train), len(split.val), len(split.test)) == (128, 32, 40)

    def test_label_fraction_half(self):
        ids = [image_id(i) for i in range(200)]
        split = make_splits(ids, (0.64, 0.16, 0.20), label_fraction=0.5)
        assert len(split.labeled) == 64
        assert set(split.labeled) <= set(split.train)

    def test_label_fraction_full(self):
        split = make_splits(list(range(50)), (0.6, 0.2, 0.2), label_fraction=1.0)
        assert sorted(split.labeled) == sorted(split.train)

    def test_disjoint_exhaustive_and_seeded(self):
        ids = [image_id(i) for i in range(40)]
        a = make_splits(ids, (0.5, 0.25, 0.25), seed=3)
        b = make_splits(ids, (0.5, 0.25, 0.25), seed=3)
        assert a == b
        union = set(a.train) | set(a.val) | set(a.test)
        assert union == set(ids)
        assert len(a.train) + len(a.val) + len(a.test) == 40

    def test_empty_split_rejected(self):
        with pytest.raises(VamaeError):
            make_splits(list(range(3)), (0.9, 0.05, 0.05))

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            DatasetSplit(("a", "b"), ("b",), ("c",), ("a",), 1.0)

    def test_splits_file_round_trip(self, tmp_path):
        ids = [image_id(i) for i in range(20)]
        split = make_splits(ids, (0.5, 0.25, 0.25), label_fraction=0.5, seed=1)
        path = tmp_path / "splits.txt"
        write_splits(path, split)
        back = read_splits(path)
        assert back.train == split.train
        assert back.val == split.val
        assert back.test == split.test
        assert set(back.labeled) == set(split.labeled)


class TestDatasetLayout:
    def test_write_and_load(self, tmp_path):
        cfg = SynthConfig(image_size=32, n_images=10, seed=4)
        split = write_dataset(tmp_path / "ds", cfg, (0.6, 0.2, 0.2), label_fraction=0.5)
        ds = load_dataset(tmp_path / "ds")
        assert isinstance(ds, Dataset)
        assert ds.split.train == split.train
        assert len(ds.images) == 10
        assert len(ds.labels) == 10
        assert len(ds.triplets) == 10
        some_id = split.train[0]
        t = ds.triplets[some_id]
        assert t.shape == (32, 32)
        assert np.all(t.skeleton <= t.vessel_mask)

    def test_load_requires_splits_file(self, tmp_path):
        with pytest.raises(VamaeError):
            load_dataset(tmp_path)

    def test_priors_optional(self, tmp_path):
        cfg = SynthConfig(image_size=32, n_images=5, seed=4)
        write_dataset(tmp_path / "ds", cfg, (0.6, 0.2, 0.2), with_priors=False)
        ds = load_dataset(tmp_path / "ds", need_priors=False)
        assert not ds.triplets
        with pytest.raises(VamaeError):
            ds.require_triplets()
