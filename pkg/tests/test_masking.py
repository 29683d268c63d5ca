import numpy as np
import pytest

from vamae.image import PatchGrid
from vamae.masking import (
    CurriculumSchedule,
    curriculum_ratio,
    hybrid_scores,
    patch_density,
    patch_skeleton_presence,
    select_mask,
)


class FixedRng:
    """Stub noise source returning preset values."""

    def __init__(self, eps):
        self.eps = np.asarray(eps, dtype=np.float64)

    def random(self, n):
        assert n == len(self.eps)
        return self.eps


class TestPatchScores:
    def test_density_extremes(self):
        grid = PatchGrid.for_image(4, 4, 2)
        assert np.array_equal(patch_density(np.zeros((4, 4)), grid), np.zeros(4))
        assert np.array_equal(patch_density(np.ones((4, 4)), grid), np.ones(4))

    def test_density_single_patch(self):
        grid = PatchGrid.for_image(4, 4, 2)
        v = np.zeros((4, 4))
        v[0:2, 0:2] = 1.0
        assert np.array_equal(patch_density(v, grid), [1, 0, 0, 0])

    def test_skeleton_presence(self):
        grid = PatchGrid.for_image(4, 4, 2)
        s = np.zeros((4, 4), dtype=np.uint8)
        assert np.array_equal(patch_skeleton_presence(s, grid), np.zeros(4))
        s[3, 3] = 1  # bottom-right patch is index 3
        assert np.array_equal(patch_skeleton_presence(s, grid), [0, 0, 0, 1])
        assert np.array_equal(
            patch_skeleton_presence(np.ones((4, 4), dtype=np.uint8), grid), np.ones(4)
        )


class TestHybridScores:
    def test_alpha_one_is_pure_structure(self, rng):
        d = rng.random(16)
        s = (rng.random(16) > 0.5).astype(float)
        w = hybrid_scores(d, s, 1.0, rng)
        assert np.allclose(w, 0.5 * d + 0.5 * s, atol=0, rtol=0)

    def test_alpha_zero_is_pure_noise(self):
        eps = np.linspace(0.1, 0.9, 8)
        w = hybrid_scores(np.ones(8), np.ones(8), 0.0, FixedRng(eps))
        assert np.array_equal(w, eps)

    def test_formula_arithmetic(self):
        w = hybrid_scores([1.0], [1.0], 0.6, FixedRng([0.5]))
        assert abs(w[0] - 0.8) < 1e-15

    def test_alpha_validated(self, rng):
        with pytest.raises(ValueError):
            hybrid_scores(np.ones(4), np.ones(4), 1.5, rng)


class TestSelectMask:
    def test_top_k_with_tie(self):
        sel = select_mask([0.1, 0.9, 0.8, 0.2], 0.75)
        assert sel.k == 3
        assert list(sel.masked_indices) == [1, 2, 3]
        assert list(sel.visible_indices()) == [0]

    def test_all_equal_lowest_index_wins(self):
        sel = select_mask(np.full(4, 0.5), 0.5)
        assert list(sel.masked_indices) == [0, 1]

    def test_count_formula(self):
        assert select_mask(np.arange(100, dtype=float), 0.75).k == 75
        assert select_mask(np.arange(10, dtype=float), 0.25).k == 3  # round(2.5) up

    def test_scale_invariance(self, rng):
        w = rng.random(32)
        base = select_mask(w, 0.5).masked_indices
        for scale in (0.001, 7.3, 1e6):
            assert np.array_equal(select_mask(w * scale, 0.5).masked_indices, base)

    def test_ratio_validated(self):
        for ratio in (0.0, 1.0, -0.5):
            with pytest.raises(ValueError):
                select_mask(np.ones(4), ratio)

    def test_monotone_in_density_at_alpha_one(self, rng):
        d = rng.random(16)
        s = np.zeros(16)
        w = hybrid_scores(d, s, 1.0, rng)
        sel = select_mask(w, 0.5)
        target = sel.masked_indices[0]
        d2 = d.copy()
        d2[target] = min(1.0, d2[target] + 0.2)
        sel2 = select_mask(hybrid_scores(d2, s, 1.0, rng), 0.5)
        assert target in sel2.masked_indices

    def test_alpha_zero_uniform_frequency(self):
        rng = np.random.default_rng(99)
        n, ratio, draws = 64, 0.75, 4000
        counts = np.zeros(n)
        for _ in range(draws):
            w = hybrid_scores(np.zeros(n), np.zeros(n), 0.0, rng)
            counts[select_mask(w, ratio).masked_indices] += 1
        freq = counts / draws
        assert np.all(np.abs(freq - ratio) < 0.03)


class TestCurriculum:
    def test_reference_stage_lookup(self):
        sched = CurriculumSchedule.default(300)
        assert curriculum_ratio(1, sched) == 0.50
        assert curriculum_ratio(20, sched) == 0.50
        assert curriculum_ratio(21, sched) == 0.65
        assert curriculum_ratio(50, sched) == 0.65
        assert curriculum_ratio(51, sched) == 0.75
        assert curriculum_ratio(300, sched) == 0.75

    def test_out_of_range(self):
        sched = CurriculumSchedule.default(300)
        for epoch in (0, 301):
            with pytest.raises(ValueError):
                curriculum_ratio(epoch, sched)

    def test_proportional_scaling_to_30(self):
        sched = CurriculumSchedule.default(30)
        assert sched.stages == ((1, 2, 0.50), (3, 5, 0.65), (6, 30, 0.75))

    def test_tiny_total_drops_collapsed_stages(self):
        sched = CurriculumSchedule.default(2)
        assert sched.total_epochs == 2
        assert all(0 < r < 1 for _, _, r in sched.stages)

    def test_invalid_stages_rejected(self):
        with pytest.raises(ValueError):
            CurriculumSchedule(((1, 10, 0.5), (12, 20, 0.75)))  # gap
        with pytest.raises(ValueError):
            CurriculumSchedule(((1, 10, 1.5),))  # bad ratio


class TestVesselTargeting:
    def test_masked_density_beats_random_mask(self):
        """Vessel-aware masks cover strictly denser patches than uniform ones."""
        from vamae.data import SynthConfig, generate_image
        from vamae.priors import compute_triplet

        rng = np.random.default_rng(0)
        cfg = SynthConfig(image_size=64, seed=21)
        checked = 0
        for i in range(12):
            img, _ = generate_image(cfg, i)
            t = compute_triplet(img)
            if t.vessel_mask.mean() < 0.05:
                continue
            grid = PatchGrid.for_image(64, 64, 8)
            d = patch_density(t.vesselness, grid)
            s = patch_skeleton_presence(t.skeleton, grid)
            aware = select_mask(hybrid_scores(d, s, 0.6, rng), 0.75)
            uniform = select_mask(rng.random(grid.patch_count), 0.75)
            assert d[aware.masked_indices].mean() > d[uniform.masked_indices].mean()
            checked += 1
        assert checked >= 5
