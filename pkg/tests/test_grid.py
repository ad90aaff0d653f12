import numpy as np
import pytest

from semgrid.core import CameraIntrinsics, Pose
from semgrid.grid import (
    UNLABELED,
    FrameShapeError,
    GridCell,
    GridConfig,
    ScrollGrid,
    fuse_label,
    traverse_cells,
)


def segment_box_cells_oracle(a, b, origin, res, dims):
    """Exhaustive oracle: slab-test the segment against every cell's AABB."""
    cells = set()
    d = b - a
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                lo = origin + np.array([i, j, k]) * res
                hi = lo + res
                t0, t1 = 0.0, 1.0
                ok = True
                for ax in range(3):
                    if d[ax] == 0.0:
                        if a[ax] < lo[ax] or a[ax] >= hi[ax]:
                            ok = False
                            break
                    else:
                        ta = (lo[ax] - a[ax]) / d[ax]
                        tb = (hi[ax] - a[ax]) / d[ax]
                        if ta > tb:
                            ta, tb = tb, ta
                        t0 = max(t0, ta)
                        t1 = min(t1, tb)
                if ok and t0 < t1:
                    cells.add((i, j, k))
    return cells


def default_config(dims=(8, 8, 8), res=0.5, **kw):
    return GridConfig(dims=dims, resolution=res, **kw)


def simple_camera(w=8, h=6):
    return CameraIntrinsics(fx=float(w), fy=float(w), cx=w / 2.0, cy=h / 2.0,
                            baseline=0.5, width=w, height=h)


class TestIndexing:
    def test_origin_maps_to_zero(self):
        g = ScrollGrid(default_config(), label_count=2)
        assert g.world_to_cell(g.origin) == (0, 0, 0)

    def test_first_cell_interior(self):
        g = ScrollGrid(default_config(res=0.1), label_count=2)
        assert g.world_to_cell(g.origin + 0.05) == (0, 0, 0)

    def test_out_of_bounds(self):
        g = ScrollGrid(default_config(dims=(4, 4, 4), res=1.0), label_count=2)
        assert g.world_to_cell([-0.01, 0, 0]) is None
        assert g.world_to_cell([4.0, 0, 0]) is None

    def test_full_scale_dimensions(self):
        cfg = GridConfig(dims=(250, 250, 80), resolution=0.1)
        assert cfg.cell_count == 5_000_000
        extent = np.array(cfg.dims) * cfg.resolution
        np.testing.assert_allclose(extent, [25.0, 25.0, 8.0])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GridConfig(dims=(0, 1, 1), resolution=0.1)
        with pytest.raises(ValueError):
            GridConfig(dims=(1, 1, 1), resolution=-1)
        with pytest.raises(ValueError):
            GridConfig(dims=(1, 1, 1), resolution=0.1, log_odds_hit=-0.5)


class TestTraversal:
    def test_axis_aligned(self):
        cells = traverse_cells([0.25, 0.25, 0.25], [3.75, 0.25, 0.25],
                               origin=[0, 0, 0], resolution=1.0, dims=(4, 4, 4))
        np.testing.assert_array_equal(cells, [[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])

    def test_single_cell(self):
        cells = traverse_cells([0.2, 0.2, 0.2], [0.8, 0.7, 0.6],
                               origin=[0, 0, 0], resolution=1.0, dims=(2, 2, 2))
        np.testing.assert_array_equal(cells, [[0, 0, 0]])

    def test_outside_box(self):
        cells = traverse_cells([-5, -5, -5], [-4, -4, -4],
                               origin=[0, 0, 0], resolution=1.0, dims=(2, 2, 2))
        assert len(cells) == 0

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(42)
        dims = (16, 16, 16)
        res = 0.5
        origin = np.array([-4.0, -4.0, -4.0])
        for _ in range(200):
            # mix of interior and exterior endpoints
            a = rng.uniform(-6, 6, 3)
            b = rng.uniform(-6, 6, 3)
            got = {tuple(c) for c in traverse_cells(a, b, origin, res, dims)}
            want = segment_box_cells_oracle(a, b, origin, res, dims)
            assert got == want


class NaiveReferenceGrid:
    """Dict-backed unbounded grid used as the recentering oracle."""

    def __init__(self):
        self.cells = {}

    def put(self, world_cell, payload):
        self.cells[tuple(world_cell)] = payload

    def inside(self, world_cell, origin_cell, dims):
        return all(origin_cell[a] <= world_cell[a] < origin_cell[a] + dims[a] for a in range(3))


class TestRecenter:
    def _populated_grid(self, dims, res=1.0):
        g = ScrollGrid(GridConfig(dims=dims, resolution=res), label_count=2)
        ref = NaiveReferenceGrid()
        rng = np.random.default_rng(0)
        for i in range(dims[0]):
            for j in range(dims[1]):
                for k in range(dims[2]):
                    val = float(rng.uniform(0.1, 3.0))
                    g.log_odds[i, j, k] = val
                    ref.put((i, j, k), val)
        return g, ref

    def test_zero_shift_noop(self):
        g, _ = self._populated_grid((4, 2, 2))
        before = g.log_odds.copy()
        assert g.shift_origin([0, 0, 0]) == []
        np.testing.assert_array_equal(g.log_odds, before)

    def test_full_displacement_evicts_everything(self):
        g, _ = self._populated_grid((4, 2, 2))
        evicted = g.shift_origin([4, 0, 0])
        assert len(evicted) == 4 * 2 * 2
        coords = {tuple(w) for w, _ in evicted}
        assert len(coords) == 16  # each cell exactly once
        assert not np.any(g.log_odds != 0)

    def test_single_cell_shift_against_reference(self):
        dims = (4, 1, 1)
        g, ref = self._populated_grid(dims)
        evicted = g.shift_origin([1, 0, 0])
        # exactly one column of one cell leaves the box
        assert len(evicted) == 1
        assert tuple(evicted[0][0]) == (0, 0, 0)
        # survivors keep identical contents, addressed by world coords
        for (w, _), _ in [(e, None) for e in evicted]:
            pass
        for world, val in ref.cells.items():
            if ref.inside(world, (1, 0, 0), dims):
                idx = g.world_to_cell((np.array(world) + 0.5) * 1.0)
                assert idx is not None
                assert g.log_odds[idx] == np.float32(val)

    def test_conservation_random_shifts(self):
        rng = np.random.default_rng(7)
        dims = (5, 4, 3)
        g, ref = self._populated_grid(dims)
        origin_cell = np.zeros(3, np.int64)
        for _ in range(10):
            shift = rng.integers(-3, 4, 3)
            g.shift_origin(shift)
            origin_cell += shift
            # every cell of the reference inside the new box must be intact
            for world, val in list(ref.cells.items()):
                if ref.inside(world, origin_cell, dims):
                    idx = g.world_to_cell((np.array(world) + 0.5) * 1.0)
                    assert g.log_odds[idx] == np.float32(val)
                else:
                    del ref.cells[world]
        assert g.active_cell_count == 5 * 4 * 3

    def test_eviction_sink_called(self):
        seen = []
        g = ScrollGrid(GridConfig(dims=(2, 1, 1), resolution=1.0), label_count=2,
                       evicted_sink=lambda w, c: seen.append((tuple(w), c.log_odds)))
        g.log_odds[0, 0, 0] = 1.5
        g.shift_origin([1, 0, 0])
        assert seen == [((0, 0, 0), 1.5)]

    def test_recenter_places_camera_at_anchor(self):
        cfg = GridConfig(dims=(10, 10, 10), resolution=1.0, anchor_fraction=(0.5, 0.5, 0.5))
        g = ScrollGrid(cfg, label_count=2)
        g.recenter([20.0, 20.0, 20.0])
        # camera cell should be the center cell of the box
        assert g.world_to_cell([20.0, 20.0, 20.0]) is not None
        np.testing.assert_array_equal(g.origin_cell, [15, 15, 15])


class TestIntegration:
    def test_all_sky_touches_nothing(self):
        cam = simple_camera()
        g = ScrollGrid(default_config(dims=(16, 16, 16), res=0.5), label_count=2)
        depth = np.full((cam.height, cam.width), 2.0)
        colors = np.zeros((cam.height, cam.width, 3))
        sky = np.ones((cam.height, cam.width), bool)
        stats = g.integrate_depth_frame(depth, colors, Pose.identity(), cam, sky)
        assert stats.rays_cast == 0
        assert not np.any(g.log_odds != 0)

    def test_hand_traced_single_ray(self):
        # camera at the center of cell (0,0,0) of a 1x1x8 grid looking down +z;
        # endpoint 3 cells ahead: cells 0..2 get one miss, cell 3 one hit
        cam = CameraIntrinsics(fx=10, fy=10, cx=0.5, cy=0.5, baseline=0.1, width=1, height=1)
        cfg = GridConfig(dims=(1, 1, 8), resolution=0.1)
        g = ScrollGrid(cfg, label_count=2)
        pose = Pose(np.eye(3), np.array([0.05, 0.05, 0.05]))
        depth = np.full((1, 1), 0.3)
        colors = np.full((1, 1, 3), 128.0)
        sky = np.zeros((1, 1), bool)
        stats = g.integrate_depth_frame(depth, colors, pose, cam, sky)
        assert stats.hits == 1
        assert stats.misses == 3
        np.testing.assert_allclose(g.log_odds[0, 0, :4],
                                   [cfg.log_odds_miss] * 3 + [cfg.log_odds_hit])
        assert np.all(g.log_odds[0, 0, 4:] == 0)
        assert g.color_count[0, 0, 3] == 1
        np.testing.assert_allclose(g.color_sum[0, 0, 3], [128, 128, 128])
        np.testing.assert_array_equal(stats.hit_cells, [[0, 0, 3]])

    def test_double_hit_accumulates(self):
        # two pixels of identical depth landing in one cell: no dedup by default
        cam = CameraIntrinsics(fx=100, fy=100, cx=1.0, cy=0.5, baseline=0.1, width=2, height=1)
        cfg = GridConfig(dims=(4, 4, 4), resolution=1.0)
        g = ScrollGrid(cfg, label_count=2)
        pose = Pose(np.eye(3), np.array([2.5, 2.5, 0.5]))
        depth = np.full((1, 2), 2.0)
        colors = np.zeros((1, 2, 3))
        sky = np.zeros((1, 2), bool)
        stats = g.integrate_depth_frame(depth, colors, pose, cam, sky)
        assert stats.hits == 2
        assert tuple(stats.hit_cells[0]) == tuple(stats.hit_cells[1])
        hit_idx = tuple(stats.hit_cells[0])
        assert g.log_odds[hit_idx] == np.float32(2 * cfg.log_odds_hit)

    def test_dedup_mode(self):
        cam = CameraIntrinsics(fx=100, fy=100, cx=1.0, cy=0.5, baseline=0.1, width=2, height=1)
        cfg = GridConfig(dims=(4, 4, 4), resolution=1.0, dedup_hits=True)
        g = ScrollGrid(cfg, label_count=2)
        pose = Pose(np.eye(3), np.array([2.5, 2.5, 0.5]))
        depth = np.full((1, 2), 2.0)
        colors = np.zeros((1, 2, 3))
        sky = np.zeros((1, 2), bool)
        g.integrate_depth_frame(depth, colors, pose, cam, sky, frame_index=0)
        hit_val = g.log_odds.max()
        assert hit_val == np.float32(cfg.log_odds_hit)

    def test_log_odds_clamped(self):
        cam = CameraIntrinsics(fx=10, fy=10, cx=0.5, cy=0.5, baseline=0.1, width=1, height=1)
        cfg = GridConfig(dims=(1, 1, 4), resolution=1.0)
        g = ScrollGrid(cfg, label_count=2)
        pose = Pose(np.eye(3), np.array([0.5, 0.5, 0.5]))
        depth = np.full((1, 1), 3.0)
        colors = np.zeros((1, 1, 3))
        sky = np.zeros((1, 1), bool)
        for i in range(30):
            g.integrate_depth_frame(depth, colors, pose, cam, sky, frame_index=i)
        assert g.log_odds.max() <= cfg.log_odds_max
        assert g.log_odds.min() >= cfg.log_odds_min

    def test_shape_mismatch(self):
        cam = simple_camera()
        g = ScrollGrid(default_config(), label_count=2)
        with pytest.raises(FrameShapeError):
            g.integrate_depth_frame(
                np.zeros((2, 2)), np.zeros((cam.height, cam.width, 3)),
                Pose.identity(), cam, np.zeros((cam.height, cam.width), bool))


class TestFusion:
    def test_uniform_observation_is_identity(self):
        cell = GridCell(0.0, np.zeros(3), 0, np.array([0.8, 0.2]), -1)
        out = fuse_label(cell, [0.5, 0.5])
        np.testing.assert_allclose(out.label_dist, [0.8, 0.2], atol=1e-12)

    def test_product_then_normalize(self):
        cell = GridCell(0.0, np.zeros(3), 0, np.array([0.6, 0.4]), -1)
        out = fuse_label(cell, [0.6, 0.4])
        np.testing.assert_allclose(out.label_dist, [0.36 / 0.52, 0.16 / 0.52], atol=1e-9)

    def test_first_observation_adopted(self):
        cell = GridCell(0.0, np.zeros(3), 0, None, -1)
        out = fuse_label(cell, [0.1, 0.9])
        np.testing.assert_allclose(out.label_dist, [0.1, 0.9])

    def test_order_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n_obs = int(rng.integers(2, 7))
            obs = rng.uniform(0.1, 1.0, size=(n_obs, 4))
            cell = GridCell(0.0, np.zeros(3), 0, None, -1)
            for o in obs:
                cell = fuse_label(cell, o / o.sum())
            perm = rng.permutation(n_obs)
            cell2 = GridCell(0.0, np.zeros(3), 0, None, -1)
            for o in obs[perm]:
                cell2 = fuse_label(cell2, o / o.sum())
            np.testing.assert_allclose(cell.label_dist, cell2.label_dist, atol=1e-6)

    def test_batched_matches_scalar(self):
        g = ScrollGrid(default_config(dims=(2, 2, 2), res=1.0), label_count=3)
        idx = np.array([[0, 0, 0], [0, 0, 0], [1, 1, 1]])
        obs = np.array([[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.9, 0.05, 0.05]])
        g.fuse_observations(idx, obs)
        # cell (0,0,0) receives the combined product of its two observations
        want = obs[0] * obs[1]
        want /= want.sum()
        np.testing.assert_allclose(g.label_probs[0, 0, 0], want, rtol=1e-5)
        np.testing.assert_allclose(g.label_probs[1, 1, 1], obs[2], rtol=1e-5)


class TestOccupiedCells:
    def test_empty_grid(self):
        g = ScrollGrid(default_config(), label_count=2)
        assert len(g.occupied_cells()) == 0

    def test_sigmoid_threshold(self):
        cfg = default_config()
        g = ScrollGrid(cfg, label_count=2)
        g.log_odds[1, 2, 3] = cfg.log_odds_max  # sigmoid(3.5) = 0.97 > 0.7
        g.fuse_label_at((1, 2, 3), [0.9, 0.1])
        occ = g.occupied_cells()
        assert len(occ) == 1
        np.testing.assert_array_equal(occ.indices[0], [1, 2, 3])
        # sigmoid(0.85) = 0.7006 barely clears the default threshold
        assert 1.0 / (1.0 + np.exp(-0.85)) > 0.7

    def test_occupied_without_label_excluded(self):
        g = ScrollGrid(default_config(), label_count=2)
        g.log_odds[0, 0, 0] = 3.0
        assert len(g.occupied_cells()) == 0

    def test_cell_center_coordinates(self):
        cfg = GridConfig(dims=(4, 4, 4), resolution=0.1)
        g = ScrollGrid(cfg, label_count=2)
        g.log_odds[0, 0, 0] = 3.0
        g.fuse_label_at((0, 0, 0), [1.0, 0.0])
        occ = g.occupied_cells()
        np.testing.assert_allclose(occ.centers[0], [0.05, 0.05, 0.05])


class TestProjection:
    def test_empty_projection(self):
        cam = simple_camera()
        g = ScrollGrid(default_config(), label_count=2)
        img, depth = g.project_to_image(Pose.identity(), cam, 40.0)
        assert np.all(img == UNLABELED)
        assert np.all(np.isinf(depth))

    def test_nearest_wins(self):
        # two labeled cells straight ahead at ~5m and ~10m project to the
        # same pixel; brute-force nearest scan confirms the winner
        cam = CameraIntrinsics(fx=50, fy=50, cx=2, cy=2, baseline=0.1, width=4, height=4)
        cfg = GridConfig(dims=(16, 16, 16), resolution=1.0)
        g = ScrollGrid(cfg, label_count=2)
        pose = Pose(np.eye(3), np.array([8.5, 2.5, 0.5]))

        for z, dist in ((5, [1.0, 0.0]), (10, [0.0, 1.0])):
            idx = g.world_to_cell([8.5, 2.5, 0.5 + z])
            g.log_odds[idx] = cfg.log_odds_max
            g.fuse_label_at(idx, dist)

        occ = g.occupied_cells()
        cam_pts = (occ.centers - pose.translation) @ pose.rotation
        nearest = int(np.argmin(cam_pts[:, 2]))
        want_label = int(np.argmax(occ.label_probs[nearest]))

        img, depth = g.project_to_image(pose, cam, 40.0)
        assert img[2, 2] == want_label == 0
        assert depth[2, 2] == pytest.approx(5.0, abs=0.6)

    def test_max_depth_cut(self):
        cam = CameraIntrinsics(fx=50, fy=50, cx=2, cy=2, baseline=0.1, width=4, height=4)
        cfg = GridConfig(dims=(16, 16, 16), resolution=1.0)
        g = ScrollGrid(cfg, label_count=2)
        pose = Pose(np.eye(3), np.array([8.5, 2.5, 0.5]))
        idx = g.world_to_cell([8.5, 2.5, 10.5])
        g.log_odds[idx] = cfg.log_odds_max
        g.fuse_label_at(idx, [1.0, 0.0])
        img, _ = g.project_to_image(pose, cam, max_depth=5.0)
        assert np.all(img == UNLABELED)


class TestBoundedMemory:
    def test_active_count_invariant(self):
        cam = simple_camera()
        cfg = GridConfig(dims=(8, 8, 8), resolution=0.5)
        g = ScrollGrid(cfg, label_count=2)
        rng = np.random.default_rng(1)
        for step in range(5):
            pos = np.array([step * 1.5, 0.0, 0.0])
            g.recenter(pos)
            depth = rng.uniform(0.5, 3.0, (cam.height, cam.width))
            colors = rng.uniform(0, 255, (cam.height, cam.width, 3))
            sky = rng.uniform(size=(cam.height, cam.width)) < 0.2
            g.integrate_depth_frame(depth, colors, Pose(np.eye(3), pos), cam, sky,
                                    frame_index=step)
            assert g.active_cell_count == cfg.cell_count
            assert g.log_odds.shape == cfg.dims
