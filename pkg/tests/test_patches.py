"""Patch grid planning, extract/merge roundtrip, margins, augmentation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelsr.patches import GridError, augment, extract, merge, plan_grid


class TestPlanGrid:
    def test_single_tile(self):
        grid = plan_grid((10, 10, 10), (10, 10, 10), margin=0)
        assert grid.origins == [(0, 0, 0)]
        assert grid.windows == [(((0, 10)), ((0, 10)), ((0, 10)))]

    def test_documented_axis_case(self):
        # volume 20, patch 10, margin 3: stride 4, origins [0,4,8,10],
        # contributions [0,7) [7,11) [11,15) [15,20)
        grid = plan_grid((20, 10, 10), (10, 10, 10), margin=3)
        axis0_origins = sorted({o[0] for o in grid.origins})
        assert axis0_origins == [0, 4, 8, 10]
        axis0_windows = sorted({w[0] for w in grid.windows})
        assert axis0_windows == [(0, 7), (7, 11), (11, 15), (15, 20)]

    def test_margin_too_large(self):
        with pytest.raises(GridError, match="margin"):
            plan_grid((16, 16, 16), (8, 8, 8), margin=4)

    def test_patch_exceeds_volume(self):
        with pytest.raises(GridError, match="exceeds"):
            plan_grid((8, 8, 8), (9, 8, 8), margin=0)

    def test_windows_partition_volume(self):
        grid = plan_grid((21, 17, 13), (8, 8, 8), margin=2)
        cover = np.zeros(grid.volume_shape, dtype=int)
        for (d0, d1), (h0, h1), (w0, w1) in grid.windows:
            cover[d0:d1, h0:h1, w0:w1] += 1
        assert np.all(cover == 1)

    def test_serializable(self):
        grid = plan_grid((16, 16, 16), (8, 8, 8), margin=3)
        d = grid.to_dict()
        assert d["margin"] == 3
        assert len(d["origins"]) == len(grid)


class TestExtractMerge:
    def test_roundtrip_exact(self):
        rng = np.random.default_rng(0)
        v = rng.standard_normal((20, 18, 16))
        grid = plan_grid(v.shape, (10, 9, 8), margin=3)
        np.testing.assert_array_equal(merge(extract(v, grid), grid), v)

    def test_single_patch_merge_is_patch(self):
        v = np.random.default_rng(1).standard_normal((8, 8, 8))
        grid = plan_grid(v.shape, (8, 8, 8), margin=2)
        np.testing.assert_array_equal(merge([v], grid), v)

    def test_origin_voxel_matches(self):
        v = np.random.default_rng(2).standard_normal((16, 16, 16))
        grid = plan_grid(v.shape, (8, 8, 8), margin=2)
        patches = extract(v, grid)
        for patch, origin in zip(patches, grid.origins):
            assert patch[0, 0, 0] == v[origin]

    def test_patch_count_is_product_of_axis_counts(self):
        grid = plan_grid((20, 20, 20), (10, 10, 10), margin=3)
        per_axis = len({o[0] for o in grid.origins})
        assert len(grid) == per_axis ** 3

    def test_constant_volume_constant_patches(self):
        v = np.full((12, 12, 12), 4.25)
        grid = plan_grid(v.shape, (8, 8, 8), margin=1)
        assert np.all(extract(v, grid) == 4.25)

    def test_margin_voxels_are_discarded(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal((20, 20, 20))
        grid = plan_grid(v.shape, (10, 10, 10), margin=3)
        patches = extract(v, grid)
        baseline = merge(patches, grid)
        vandalized = patches.copy()
        for i, (origin, window) in enumerate(zip(grid.origins, grid.windows)):
            # corrupt every voxel the crop window does not contribute
            keep = np.zeros(grid.patch_shape, dtype=bool)
            src = tuple(slice(w0 - o, w1 - o) for (w0, w1), o in zip(window, origin))
            keep[src] = True
            vandalized[i][~keep] = 1e6
        np.testing.assert_array_equal(merge(vandalized, grid), baseline)

    def test_count_mismatch(self):
        grid = plan_grid((16, 16, 16), (8, 8, 8), margin=2)
        with pytest.raises(GridError, match="patches"):
            merge([np.zeros((8, 8, 8))], grid)

    def test_shape_mismatch(self):
        grid = plan_grid((16, 16, 16), (8, 8, 8), margin=2)
        with pytest.raises(GridError):
            extract(np.zeros((15, 16, 16)), grid)


@settings(max_examples=60, deadline=None)
@given(
    st.tuples(st.integers(8, 24), st.integers(8, 24), st.integers(8, 24)),
    st.integers(7, 12),
    st.integers(0, 3),
    st.integers(0, 2 ** 31 - 1),
)
def test_roundtrip_property(shape, patch, margin, seed):
    patch_shape = tuple(min(patch, s) for s in shape)
    if any(2 * margin >= p for p in patch_shape):
        margin = min(patch_shape) // 2 - 1 if min(patch_shape) > 2 else 0
    grid = plan_grid(shape, patch_shape, margin)
    v = np.random.default_rng(seed).standard_normal(shape)
    np.testing.assert_array_equal(merge(extract(v, grid), grid), v)


class TestAugment:
    def test_disabled_is_identity(self):
        p = np.random.default_rng(0).standard_normal((5, 5, 5))
        np.testing.assert_array_equal(augment(p, seed=3, enabled_ops=()), p)

    def test_deterministic(self):
        p = np.random.default_rng(1).standard_normal((5, 5, 5))
        np.testing.assert_array_equal(augment(p, seed=7), augment(p, seed=7))

    def test_double_flip_identity(self):
        p = np.random.default_rng(2).standard_normal((4, 4, 4))
        once = np.flip(p, axis=1)
        np.testing.assert_array_equal(np.flip(once, axis=1), p)

    def test_mean_preserved(self):
        p = np.random.default_rng(3).standard_normal((6, 6, 6))
        for seed in range(10):
            out = augment(p, seed=seed)
            assert abs(out.mean() - p.mean()) < 1e-12

    def test_result_is_some_flip_composition(self):
        p = np.random.default_rng(4).standard_normal((4, 4, 4))
        out = augment(p, seed=11)
        candidates = []
        for fd in (False, True):
            for fh in (False, True):
                for fw in (False, True):
                    q = p
                    if fd:
                        q = np.flip(q, 0)
                    if fh:
                        q = np.flip(q, 1)
                    if fw:
                        q = np.flip(q, 2)
                    candidates.append(q)
        assert any(np.array_equal(out, c) for c in candidates)

    def test_unknown_op(self):
        with pytest.raises(GridError):
            augment(np.zeros((4, 4, 4)), 0, enabled_ops=("rotate",))
