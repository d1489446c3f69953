import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfpn.errors import DuplicateCoord, EmptyCloud, InvalidPoint, StrideViolation
from sfpn.sparse_tensor import (
    CoordIndex,
    SparseTensor,
    build_index,
    downsample_coords,
    load_point_cloud,
    save_point_cloud,
    voxelize,
)


class TestVoxelize:
    def test_single_point_floor(self):
        t, pmap = voxelize(np.array([[0.05, 0.05, 0.05]]), 0.1)
        assert len(t) == 1
        assert t.coords.tolist() == [[0, 0, 0]]
        assert pmap.tolist() == [0]
        assert t.stride == 1

    def test_two_points_share_cell(self):
        pts = np.array([[0.05, 0.05, 0.05], [0.07, 0.01, 0.02]])
        t, pmap = voxelize(pts, 0.1)
        assert len(t) == 1
        assert pmap.tolist() == [0, 0]

    def test_matches_brute_force_unique_floor(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 1, size=(1000, 3))
        t, pmap = voxelize(pts, 0.02)
        expected = {tuple(c) for c in np.floor(pts / 0.02).astype(np.int64)}
        assert {tuple(c) for c in t.coords} == expected
        # every point maps to the row holding its own cell
        cells = np.floor(pts / 0.02).astype(np.int64)
        assert np.array_equal(t.coords[pmap], cells)

    def test_feature_mean_per_cell(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 0.5, size=(200, 3))
        feats = rng.normal(size=(200, 4))
        t, pmap = voxelize(pts, 0.1, feats)
        for row in range(len(t)):
            sel = pmap == row
            np.testing.assert_allclose(
                t.features[row], feats[sel].mean(axis=0), rtol=0, atol=1e-6)

    def test_constant_feature_when_none_given(self):
        t, _ = voxelize(np.random.default_rng(2).uniform(0, 1, (50, 3)), 0.1)
        assert t.num_channels == 1
        assert np.all(t.features == 1.0)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(0, 1, size=(400, 3))
        feats = rng.normal(size=(400, 3))
        t1, _ = voxelize(pts, 0.05, feats)
        perm = rng.permutation(400)
        t2, _ = voxelize(pts[perm], 0.05, feats[perm])
        assert np.array_equal(t1.coords, t2.coords)
        np.testing.assert_allclose(t1.features, t2.features, atol=1e-6)

    @given(k=st.integers(-40, 40), seed=st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_translation_consistency(self, k, seed):
        # points generated mid-cell on a dyadic grid so the shifted sums
        # cannot straddle a cell boundary through float rounding
        vs = 0.25
        rng = np.random.default_rng(seed)
        cells = rng.integers(-20, 20, size=(50, 3))
        pts = (cells + rng.uniform(0.25, 0.75, size=(50, 3))) * vs
        t1, _ = voxelize(pts, vs)
        t2, _ = voxelize(pts + k * vs, vs)
        assert np.array_equal(t2.coords, t1.coords + k)

    def test_empty_raises(self):
        with pytest.raises(EmptyCloud):
            voxelize(np.zeros((0, 3)), 0.1)

    def test_non_finite_reports_index(self):
        pts = np.array([[0.0, 0, 0], [0.1, np.nan, 0.1], [0.2, 0, 0]])
        with pytest.raises(InvalidPoint) as exc:
            voxelize(pts, 0.1)
        assert exc.value.index == 1


class TestCoordIndex:
    def test_trivial_lookup(self):
        idx = build_index(np.array([[0, 0, 0]]))
        assert idx.get((0, 0, 0)) == 0
        assert idx.get((1, 0, 0)) is None
        assert (0, 0, 0) in idx
        assert (1, 0, 0) not in idx

    def test_order_independent_membership(self):
        rng = np.random.default_rng(4)
        coords = np.unique(rng.integers(-5, 5, (60, 3)), axis=0)
        perm = rng.permutation(len(coords))
        a, b = build_index(coords), build_index(coords[perm])
        queries = rng.integers(-6, 6, (200, 3))
        assert np.array_equal(a.lookup(queries) >= 0, b.lookup(queries) >= 0)

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(5)
        coords = np.unique(rng.integers(-50, 50, (10_000, 3)), axis=0)
        idx = build_index(coords)
        queries = rng.integers(-55, 55, (500, 3))
        rows = idx.lookup(queries)
        for q, row in zip(queries, rows):
            hits = np.flatnonzero((coords == q).all(axis=1))
            if hits.size:
                assert row == hits[0]
            else:
                assert row == -1

    def test_duplicate_raises(self):
        with pytest.raises(DuplicateCoord):
            build_index(np.array([[1, 2, 3], [1, 2, 3]]))

    def test_out_of_range_lookup_is_absent(self):
        idx = build_index(np.array([[0, 0, 0]]))
        assert idx.lookup(np.array([[1 << 21, 0, 0]])).tolist() == [-1]


class TestDownsample:
    def test_two_voxels_collapse(self):
        out = downsample_coords(np.array([[0, 0, 0], [1, 0, 0]]), 1)
        assert out.tolist() == [[0, 0, 0]]

    def test_stride2_to_stride4(self):
        out = downsample_coords(np.array([[2, 2, 2]]), 2)
        assert out.tolist() == [[0, 0, 0]]

    def test_matches_dense_occupancy_pool(self):
        rng = np.random.default_rng(6)
        coords = np.unique(rng.integers(0, 16, (300, 3)), axis=0)
        out = downsample_coords(coords, 1)
        grid = np.zeros((16, 16, 16), dtype=bool)
        grid[coords[:, 0], coords[:, 1], coords[:, 2]] = True
        pooled = grid.reshape(8, 2, 8, 2, 8, 2).any(axis=(1, 3, 5))
        expected = np.argwhere(pooled) * 2
        assert np.array_equal(out, expected)

    @given(seed=st.integers(0, 500))
    @settings(max_examples=30, deadline=None)
    def test_twice_factor2_equals_factor4(self, seed):
        rng = np.random.default_rng(seed)
        coords = np.unique(rng.integers(-16, 16, (80, 3)), axis=0)
        twice = downsample_coords(downsample_coords(coords, 1), 2)
        direct = np.unique((coords // 4) * 4, axis=0)
        assert np.array_equal(twice, direct)

    def test_lattice_violation(self):
        with pytest.raises(StrideViolation):
            downsample_coords(np.array([[1, 0, 0]]), 2)


class TestSparseTensor:
    def test_validate_catches_stride_violation(self):
        with pytest.raises(StrideViolation):
            SparseTensor(np.array([[1, 0, 0]]), np.zeros((1, 1)), stride=2)

    def test_row_count_mismatch(self):
        with pytest.raises(ValueError):
            SparseTensor(np.zeros((2, 3), np.int64), np.zeros((3, 1)))

    def test_validate_full(self):
        t = SparseTensor(np.array([[0, 0, 0], [2, 0, 0]]), np.ones((2, 2)), stride=2)
        t.validate()

    def test_debug_mode_validates_everywhere(self, monkeypatch):
        import sfpn.sparse_tensor as mod
        monkeypatch.setattr(mod, "DEBUG_VALIDATE", True)
        t, _ = voxelize(np.random.default_rng(7).uniform(0, 1, (100, 3)), 0.1)
        t.validate()

    def test_voxel_centers(self):
        t = SparseTensor(np.array([[0, 0, 0], [2, 0, 0]]), np.ones((2, 1)),
                         stride=2, voxel_size=0.1)
        np.testing.assert_allclose(t.voxel_centers(), [[0.1, 0.1, 0.1], [0.3, 0.1, 0.1]])


class TestPointCloudFile:
    def test_round_trip_plain(self, tmp_path):
        pts = np.random.default_rng(8).uniform(-2, 2, (123, 3)).astype(np.float32)
        path = tmp_path / "cloud.spc"
        save_point_cloud(path, pts)
        loaded, feats = load_point_cloud(path)
        assert feats is None
        assert np.array_equal(loaded, pts)

    def test_round_trip_with_features(self, tmp_path):
        rng = np.random.default_rng(9)
        pts = rng.uniform(-2, 2, (40, 3)).astype(np.float32)
        feats = rng.normal(size=(40, 5)).astype(np.float32)
        path = tmp_path / "cloud.spc"
        save_point_cloud(path, pts, feats)
        loaded_pts, loaded_feats = load_point_cloud(path)
        assert np.array_equal(loaded_pts, pts)
        assert np.array_equal(loaded_feats, feats)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.spc"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_point_cloud(path)
