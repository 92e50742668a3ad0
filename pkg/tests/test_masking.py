import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcjepa.masking import (MaskingConfig, MaskSamplingError, MaskSpec, admissible_sizes, sample_mask,
                            sample_masks, validate_mask)

GRID = (8, 8)


class TestSampleMask:
    def test_default_target_sizes(self):
        cfg = MaskingConfig()
        for seed in range(200):
            spec = sample_mask(cfg, GRID, np.random.default_rng(seed))
            assert all(9 <= len(b) <= 12 for b in spec.targets)

    def test_admissible_sizes_enumeration(self):
        sizes = admissible_sizes((0.15, 0.2), (0.75, 1.5), GRID)
        assert set(sizes) == {(3, 3), (3, 4), (4, 3)}

    def test_full_context_without_targets(self):
        cfg = MaskingConfig(num_targets=0, context_scale=(1.0, 1.0))
        spec = sample_mask(cfg, GRID, np.random.default_rng(0))
        np.testing.assert_array_equal(spec.context, np.arange(64))
        assert spec.targets == []

    def test_fixed_seed_is_reproducible(self):
        cfg = MaskingConfig()
        a = sample_masks(cfg, GRID, 3, np.random.default_rng(42))
        b = sample_masks(cfg, GRID, 3, np.random.default_rng(42))
        np.testing.assert_array_equal(a.context, b.context)
        np.testing.assert_array_equal(a.targets, b.targets)

    def test_batch_shapes(self):
        m = sample_masks(MaskingConfig(), GRID, 5, np.random.default_rng(0))
        assert m.targets.shape[:2] == (4, 5)
        assert m.context.shape[0] == 5

    def test_infeasible_config_raises(self):
        cfg = MaskingConfig(target_scale=(0.5, 0.5), target_aspect=(4.0, 4.0))
        with pytest.raises(MaskSamplingError):
            sample_mask(cfg, GRID, np.random.default_rng(0))

    def test_context_emptied_raises(self):
        cfg = MaskingConfig(num_targets=4, target_scale=(0.9, 1.0), target_aspect=(1.0, 1.0),
                            context_scale=(0.1, 0.1))
        with pytest.raises(MaskSamplingError):
            sample_mask(cfg, GRID, np.random.default_rng(0))

    @pytest.mark.parametrize("bad", [dict(target_scale=(0.0, 0.2)), dict(context_scale=(0.9, 0.8)),
                                     dict(target_aspect=(-1.0, 1.0)), dict(num_targets=-1)])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            MaskingConfig(**bad)


class TestValidateMask:
    def test_overlap_reported(self):
        spec = MaskSpec(GRID, np.array([0]), [np.array([0])])
        assert any("overlap" in p for p in validate_mask(spec))

    def test_non_rectangle_reported(self):
        spec = MaskSpec(GRID, np.array([10]), [np.array([0, 3])])
        assert any("rectangle" in p for p in validate_mask(spec))

    def test_empty_context_reported(self):
        spec = MaskSpec(GRID, np.array([], dtype=int), [np.array([0])])
        assert any("context is empty" in p for p in validate_mask(spec))

    def test_wrong_block_count(self):
        spec = MaskSpec(GRID, np.array([10]), [np.array([0])])
        assert validate_mask(spec, MaskingConfig())

    def test_never_raises_on_garbage(self):
        spec = MaskSpec(GRID, np.array([99, -1]), [np.array([]), np.array([70])])
        assert len(validate_mask(spec)) >= 3

    def test_ten_thousand_seeds_are_valid(self):
        cfg = MaskingConfig()
        bad = []
        for seed in range(10_000):
            spec = sample_mask(cfg, GRID, np.random.default_rng(seed))
            problems = validate_mask(spec, cfg)
            if problems:
                bad.append((seed, problems))
        assert not bad, bad[:3]


class TestProperties:
    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6),
           st.sampled_from([(0.1, 0.15), (0.15, 0.2), (0.2, 0.25)]),
           st.sampled_from([(0.65, 0.8), (0.75, 0.9), (0.85, 1.0)]))
    def test_batch_invariants(self, seed, batch, tscale, cscale):
        cfg = MaskingConfig(target_scale=tscale, context_scale=cscale)
        m = sample_masks(cfg, GRID, batch, np.random.default_rng(seed))
        for spec in m.specs:
            assert validate_mask(spec, cfg) == []
        # one block size per batch
        assert len({len(b) for s in m.specs for b in s.targets}) == 1
        assert len({len(s.context) for s in m.specs}) == 1
        for b in range(batch):
            assert not np.intersect1d(m.context[b], m.targets[:, b].ravel()).size

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_pure_function_of_seed(self, seed):
        cfg = MaskingConfig()
        a = sample_masks(cfg, GRID, 2, np.random.default_rng(seed))
        b = sample_masks(cfg, GRID, 2, np.random.default_rng(seed))
        assert np.array_equal(a.context, b.context) and np.array_equal(a.targets, b.targets)

    def test_target_union_deduplicates(self):
        spec = MaskSpec(GRID, np.array([63]), [np.array([0, 1]), np.array([1, 2])])
        np.testing.assert_array_equal(spec.target_union, [0, 1, 2])
