"""Bounded scrolling 3D occupancy grid with per-cell color and label fusion.

The grid is a fixed-size dense array that follows the camera. Storage slots
are addressed by wrapping world cell indices modulo the grid dimensions, so
recentering never copies surviving cells: only the slots whose world
coordinates leave the bounding box are reset (and streamed to an optional
eviction sink). Active memory is exactly dims[0]*dims[1]*dims[2] cells for
any trajectory length.

Occupancy uses additive log-odds evidence, updated by exact voxel traversal
of each depth ray (every cell the segment crosses receives a miss, the
endpoint cell a hit). Labels fuse multiplicatively per observation and colors
as a running mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from numba import njit

from semgrid.core import (
    DEFAULT_LOG_EPSILON,
    CameraIntrinsics,
    InvalidDistribution,
    Pose,
    SemgridError,
    normalize,
)

UNLABELED = -1


class FrameShapeError(SemgridError):
    """Depth/color/sky buffers disagree with the camera dimensions."""


class PoseError(SemgridError):
    """Non-finite camera pose."""


@dataclass(frozen=True)
class GridConfig:
    dims: tuple[int, int, int]
    resolution: float
    occupied_threshold: float = 0.7
    log_odds_hit: float = 0.85
    log_odds_miss: float = -0.4
    log_odds_min: float = -3.5
    log_odds_max: float = 3.5
    # camera position inside the box, as a fraction of each axis extent
    anchor_fraction: tuple[float, float, float] = (0.5, 0.5, 0.25)
    # when True, a cell takes at most one hit and one miss per frame
    dedup_hits: bool = False

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError("dims must be three positive integers")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if not 0 < self.occupied_threshold < 1:
            raise ValueError("occupied_threshold must lie in (0, 1)")
        if not self.log_odds_hit > 0 > self.log_odds_miss:
            raise ValueError("need log_odds_hit > 0 > log_odds_miss")
        if not self.log_odds_min < 0 < self.log_odds_max:
            raise ValueError("need log_odds_min < 0 < log_odds_max")

    @property
    def cell_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]


@dataclass(frozen=True)
class GridCell:
    """Snapshot of one cell's state (used by accessors and the eviction sink)."""

    log_odds: float
    color_sum: np.ndarray
    color_count: int
    label_dist: Optional[np.ndarray]
    last_update: int

    @property
    def fused_color(self) -> Optional[np.ndarray]:
        if self.color_count == 0:
            return None
        return self.color_sum / self.color_count


def fuse_label(cell: GridCell, observation) -> GridCell:
    """Multiply-and-normalize label fusion for a single observation.

    An unobserved cell adopts the observation. The stored distribution is
    floored at a small epsilon first so one confident-wrong observation can
    never zero out a label permanently.
    """
    obs = normalize(observation)
    if cell.label_dist is None:
        return replace(cell, label_dist=obs)
    stored = np.maximum(np.asarray(cell.label_dist, dtype=np.float64), DEFAULT_LOG_EPSILON)
    return replace(cell, label_dist=normalize(stored * obs))


@dataclass
class IntegrationStats:
    rays_cast: int
    hits: int
    misses: int
    # aligned arrays: pixel (row, col) and the storage cell its ray endpoint hit
    hit_pixels: np.ndarray  # (K, 2) int32
    hit_cells: np.ndarray  # (K, 3) int32


@dataclass
class OccupiedCells:
    """The CRF node set: occupied cells that carry a fused label."""

    indices: np.ndarray  # (K, 3) storage indices
    centers: np.ndarray  # (K, 3) world coordinates of cell centers
    colors: np.ndarray  # (K, 3) fused RGB
    label_probs: np.ndarray  # (K, L)

    def __len__(self):
        return self.indices.shape[0]


@njit(cache=True)
def _walk_segment(ax, ay, az, bx, by, bz, ox, oy, oz, res, nx, ny, nz, out):
    """Exact voxel traversal of segment a->b clipped to the grid box.

    Writes local cell coords to ``out`` and returns the count. Visits every
    cell the segment passes through, in order.
    """
    dx = bx - ax
    dy = by - ay
    dz = bz - az
    t0 = 0.0
    t1 = 1.0
    # clip to the box [o, o + n*res) per axis
    for axis in range(3):
        if axis == 0:
            a, d, lo = ax, dx, ox
            hi = ox + nx * res
        elif axis == 1:
            a, d, lo = ay, dy, oy
            hi = oy + ny * res
        else:
            a, d, lo = az, dz, oz
            hi = oz + nz * res
        if d == 0.0:
            if a < lo or a >= hi:
                return 0
        else:
            ta = (lo - a) / d
            tb = (hi - a) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if t0 > t1:
        return 0

    sx = ax + t0 * dx
    sy = ay + t0 * dy
    sz = az + t0 * dz
    ix = int(np.floor((sx - ox) / res))
    iy = int(np.floor((sy - oy) / res))
    iz = int(np.floor((sz - oz) / res))
    if ix < 0:
        ix = 0
    elif ix >= nx:
        ix = nx - 1
    if iy < 0:
        iy = 0
    elif iy >= ny:
        iy = ny - 1
    if iz < 0:
        iz = 0
    elif iz >= nz:
        iz = nz - 1

    big = 1e300
    if dx > 0:
        step_x, tmax_x, tdelta_x = 1, (ox + (ix + 1) * res - ax) / dx, res / dx
    elif dx < 0:
        step_x, tmax_x, tdelta_x = -1, (ox + ix * res - ax) / dx, -res / dx
    else:
        step_x, tmax_x, tdelta_x = 0, big, big
    if dy > 0:
        step_y, tmax_y, tdelta_y = 1, (oy + (iy + 1) * res - ay) / dy, res / dy
    elif dy < 0:
        step_y, tmax_y, tdelta_y = -1, (oy + iy * res - ay) / dy, -res / dy
    else:
        step_y, tmax_y, tdelta_y = 0, big, big
    if dz > 0:
        step_z, tmax_z, tdelta_z = 1, (oz + (iz + 1) * res - az) / dz, res / dz
    elif dz < 0:
        step_z, tmax_z, tdelta_z = -1, (oz + iz * res - az) / dz, -res / dz
    else:
        step_z, tmax_z, tdelta_z = 0, big, big

    count = 0
    while True:
        out[count, 0] = ix
        out[count, 1] = iy
        out[count, 2] = iz
        count += 1
        tm = tmax_x
        if tmax_y < tm:
            tm = tmax_y
        if tmax_z < tm:
            tm = tmax_z
        if tm >= t1:
            return count
        if tmax_x <= tmax_y and tmax_x <= tmax_z:
            ix += step_x
            tmax_x += tdelta_x
            if ix < 0 or ix >= nx:
                return count
        elif tmax_y <= tmax_z:
            iy += step_y
            tmax_y += tdelta_y
            if iy < 0 or iy >= ny:
                return count
        else:
            iz += step_z
            tmax_z += tdelta_z
            if iz < 0 or iz >= nz:
                return count


@njit(cache=True)
def _integrate_rays(
    cam,
    ends,
    cols,
    origin,
    origin_cell,
    res,
    log_odds,
    color_sum,
    color_count,
    lo_hit,
    lo_miss,
    lo_min,
    lo_max,
    hit_cells,
    dedup,
    hit_stamp,
    miss_stamp,
    stamp,
):
    nx, ny, nz = log_odds.shape
    max_cells = nx + ny + nz + 3
    scratch = np.empty((max_cells, 3), np.int64)
    n_hits = 0
    n_miss = 0
    for r in range(ends.shape[0]):
        count = _walk_segment(
            cam[0], cam[1], cam[2], ends[r, 0], ends[r, 1], ends[r, 2],
            origin[0], origin[1], origin[2], res, nx, ny, nz, scratch,
        )
        # endpoint cell, from the same arithmetic as world_to_cell
        ex = int(np.floor((ends[r, 0] - origin[0]) / res))
        ey = int(np.floor((ends[r, 1] - origin[1]) / res))
        ez = int(np.floor((ends[r, 2] - origin[2]) / res))
        end_inside = 0 <= ex < nx and 0 <= ey < ny and 0 <= ez < nz
        for c in range(count):
            lx, ly, lz = scratch[c, 0], scratch[c, 1], scratch[c, 2]
            sx = (origin_cell[0] + lx) % nx
            sy = (origin_cell[1] + ly) % ny
            sz = (origin_cell[2] + lz) % nz
            if end_inside and lx == ex and ly == ey and lz == ez:
                if dedup and hit_stamp[sx, sy, sz] == stamp:
                    continue
                v = log_odds[sx, sy, sz] + lo_hit
                if v > lo_max:
                    v = lo_max
                log_odds[sx, sy, sz] = v
                color_sum[sx, sy, sz, 0] += cols[r, 0]
                color_sum[sx, sy, sz, 1] += cols[r, 1]
                color_sum[sx, sy, sz, 2] += cols[r, 2]
                color_count[sx, sy, sz] += 1
                if dedup:
                    hit_stamp[sx, sy, sz] = stamp
                n_hits += 1
            else:
                if dedup and miss_stamp[sx, sy, sz] == stamp:
                    continue
                v = log_odds[sx, sy, sz] + lo_miss
                if v < lo_min:
                    v = lo_min
                log_odds[sx, sy, sz] = v
                if dedup:
                    miss_stamp[sx, sy, sz] = stamp
                n_miss += 1
        if end_inside:
            hit_cells[r, 0] = (origin_cell[0] + ex) % nx
            hit_cells[r, 1] = (origin_cell[1] + ey) % ny
            hit_cells[r, 2] = (origin_cell[2] + ez) % nz
        else:
            hit_cells[r, 0] = -1
            hit_cells[r, 1] = -1
            hit_cells[r, 2] = -1
    return n_hits, n_miss


def traverse_cells(a, b, origin, resolution, dims) -> np.ndarray:
    """Local cell coordinates the segment a->b crosses inside the box."""
    nx, ny, nz = (int(d) for d in dims)
    out = np.empty((nx + ny + nz + 3, 3), np.int64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    o = np.asarray(origin, dtype=np.float64)
    count = _walk_segment(
        a[0], a[1], a[2], b[0], b[1], b[2], o[0], o[1], o[2],
        float(resolution), nx, ny, nz, out,
    )
    return out[:count].copy()


class ScrollGrid:
    """Fixed-dimension occupancy grid that scrolls with the camera.

    ``label_count`` sizes the per-cell label distributions. ``evicted_sink``
    receives ``(world_cell_coords, GridCell)`` for every cell with any
    accumulated evidence that scrolls out of the box; untouched cells are
    dropped silently.

    Single writer per grid: integration and recentering mutate storage and
    must not run concurrently with anything else. ``occupied_cells`` and
    ``project_to_image`` are pure reads and safe to run concurrently with
    each other.
    """

    def __init__(
        self,
        config: GridConfig,
        label_count: int,
        origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
        evicted_sink: Optional[Callable] = None,
    ):
        if label_count < 1:
            raise ValueError("label_count must be positive")
        self.config = config
        self.label_count = int(label_count)
        self.evicted_sink = evicted_sink
        self.origin_cell = np.floor(
            np.asarray(origin, dtype=np.float64) / config.resolution + 0.5
        ).astype(np.int64)
        dims = config.dims
        self.log_odds = np.zeros(dims, np.float32)
        self.color_sum = np.zeros(dims + (3,), np.float32)
        self.color_count = np.zeros(dims, np.uint32)
        self.label_probs = np.zeros(dims + (self.label_count,), np.float32)
        self.has_label = np.zeros(dims, bool)
        self.last_update = np.full(dims, -1, np.int32)
        self._hit_stamp = None
        self._miss_stamp = None

    @property
    def origin(self) -> np.ndarray:
        """World coordinate of the box's minimum corner."""
        return self.origin_cell * self.config.resolution

    @property
    def active_cell_count(self) -> int:
        return self.log_odds.size

    # ---------------------------------------------------------------- indexing

    def world_to_cell(self, p) -> Optional[tuple[int, int, int]]:
        """Storage index of the cell containing world point p, or None."""
        local = np.floor(
            (np.asarray(p, dtype=np.float64) - self.origin) / self.config.resolution
        ).astype(np.int64)
        dims = self.config.dims
        if np.any(local < 0) or np.any(local >= np.asarray(dims)):
            return None
        s = (self.origin_cell + local) % np.asarray(dims)
        return int(s[0]), int(s[1]), int(s[2])

    def _axis_world_coords(self, axis: int) -> np.ndarray:
        """World cell index of every storage slot along one axis."""
        n = self.config.dims[axis]
        o = int(self.origin_cell[axis])
        idx = np.arange(n)
        return o + ((idx - o) % n)

    def cell_world_coords(self, indices: np.ndarray) -> np.ndarray:
        """World cell indices (K, 3) for storage indices (K, 3)."""
        out = np.empty_like(indices, dtype=np.int64)
        for a in range(3):
            coords = self._axis_world_coords(a)
            out[:, a] = coords[indices[:, a]]
        return out

    def cell(self, index: tuple[int, int, int]) -> GridCell:
        i, j, k = index
        dist = None
        if self.has_label[i, j, k]:
            dist = np.asarray(self.label_probs[i, j, k], dtype=np.float64).copy()
        return GridCell(
            log_odds=float(self.log_odds[i, j, k]),
            color_sum=np.asarray(self.color_sum[i, j, k], dtype=np.float64).copy(),
            color_count=int(self.color_count[i, j, k]),
            label_dist=dist,
            last_update=int(self.last_update[i, j, k]),
        )

    # -------------------------------------------------------------- recentering

    def recenter(self, camera_position) -> list[tuple[np.ndarray, GridCell]]:
        """Shift the box so the camera sits at the configured anchor fraction.

        Returns the evicted (world cell coords, snapshot) pairs that carried
        evidence; they are also forwarded to the eviction sink.
        """
        cam = np.asarray(camera_position, dtype=np.float64)
        cfg = self.config
        target = cam / cfg.resolution - np.asarray(cfg.anchor_fraction) * np.asarray(cfg.dims)
        new_origin_cell = np.floor(target + 0.5).astype(np.int64)
        return self.shift_origin(new_origin_cell - self.origin_cell)

    def shift_origin(self, shift_cells) -> list[tuple[np.ndarray, GridCell]]:
        """Move the box by a whole number of cells along each axis."""
        shift = np.asarray(shift_cells, dtype=np.int64)
        if np.all(shift == 0):
            return []
        dims = np.asarray(self.config.dims)
        new_origin_cell = self.origin_cell + shift

        # a storage slot is evicted when its world coordinate leaves the new
        # box along any axis
        axis_evict = []
        for a in range(3):
            w = self._axis_world_coords(a)
            axis_evict.append((w < new_origin_cell[a]) | (w >= new_origin_cell[a] + dims[a]))
        mask = (
            axis_evict[0][:, None, None]
            | axis_evict[1][None, :, None]
            | axis_evict[2][None, None, :]
        )

        touched = mask & (
            (self.log_odds != 0) | (self.color_count > 0) | self.has_label | (self.last_update >= 0)
        )
        evicted = []
        if np.any(touched):
            idx = np.argwhere(touched)
            world = self.cell_world_coords(idx)
            for (i, j, k), w in zip(idx, world):
                snap = self.cell((i, j, k))
                evicted.append((w, snap))
                if self.evicted_sink is not None:
                    self.evicted_sink(w, snap)

        self.log_odds[mask] = 0.0
        self.color_sum[mask] = 0.0
        self.color_count[mask] = 0
        self.label_probs[mask] = 0.0
        self.has_label[mask] = False
        self.last_update[mask] = -1
        self.origin_cell = new_origin_cell
        return evicted

    # -------------------------------------------------------------- integration

    def integrate_depth_frame(
        self,
        depth: np.ndarray,
        colors: np.ndarray,
        pose: Pose,
        intrinsics: CameraIntrinsics,
        sky_mask: np.ndarray,
        max_range: float = np.inf,
        frame_index: int = 0,
    ) -> IntegrationStats:
        """Ray-trace one depth frame into the grid.

        Every non-sky pixel with finite positive depth up to max_range casts
        a ray from the camera center; traversed cells take the miss update,
        the endpoint cell the hit update plus the pixel color. Sky pixels are
        excluded entirely (they carry no valid depth).
        """
        h, w = intrinsics.height, intrinsics.width
        depth = np.asarray(depth)
        colors = np.asarray(colors)
        sky_mask = np.asarray(sky_mask, dtype=bool)
        if depth.shape != (h, w) or sky_mask.shape != (h, w) or colors.shape != (h, w, 3):
            raise FrameShapeError(
                f"expected {(h, w)} buffers, got depth {depth.shape}, "
                f"colors {colors.shape}, sky {sky_mask.shape}"
            )
        if not (np.all(np.isfinite(pose.rotation)) and np.all(np.isfinite(pose.translation))):
            raise PoseError("non-finite pose")

        valid = np.isfinite(depth) & (depth > 0) & (depth <= max_range) & ~sky_mask
        vv, uu = np.nonzero(valid)
        stats = IntegrationStats(
            rays_cast=len(vv),
            hits=0,
            misses=0,
            hit_pixels=np.stack([vv, uu], axis=1).astype(np.int32),
            hit_cells=np.full((len(vv), 3), -1, np.int32),
        )
        if len(vv) == 0:
            return stats

        pts_cam = intrinsics.back_project(uu.astype(np.float64), vv.astype(np.float64), depth[vv, uu])
        ends = pose.transform(pts_cam)
        cols = np.ascontiguousarray(colors[vv, uu], dtype=np.float32)

        cfg = self.config
        if cfg.dedup_hits and self._hit_stamp is None:
            self._hit_stamp = np.full(cfg.dims, -1, np.int64)
            self._miss_stamp = np.full(cfg.dims, -1, np.int64)
        dedup = bool(cfg.dedup_hits)
        stamp_arr = self._hit_stamp if dedup else np.empty((1, 1, 1), np.int64)
        miss_arr = self._miss_stamp if dedup else np.empty((1, 1, 1), np.int64)

        hit_cells = np.full((len(vv), 3), -1, np.int64)
        n_hits, n_miss = _integrate_rays(
            pose.translation,
            np.ascontiguousarray(ends),
            cols,
            self.origin.astype(np.float64),
            self.origin_cell,
            float(cfg.resolution),
            self.log_odds,
            self.color_sum,
            self.color_count,
            np.float32(cfg.log_odds_hit),
            np.float32(cfg.log_odds_miss),
            np.float32(cfg.log_odds_min),
            np.float32(cfg.log_odds_max),
            hit_cells,
            dedup,
            stamp_arr,
            miss_arr,
            int(frame_index),
        )
        stats.hits = int(n_hits)
        stats.misses = int(n_miss)
        landed = hit_cells[:, 0] >= 0
        stats.hit_pixels = stats.hit_pixels[landed]
        stats.hit_cells = hit_cells[landed].astype(np.int32)
        iz, jz, kz = stats.hit_cells.T
        self.last_update[iz, jz, kz] = frame_index
        return stats

    # ------------------------------------------------------------- label fusion

    def fuse_label_at(self, index: tuple[int, int, int], observation) -> None:
        cell = fuse_label(self.cell(index), observation)
        self.label_probs[index] = cell.label_dist
        self.has_label[index] = True

    def fuse_observations(self, cell_indices: np.ndarray, observations: np.ndarray) -> None:
        """Fuse a batch of observations; duplicate cells are combined first.

        Duplicates within the batch multiply together (in log space) and the
        resulting combined observation fuses once per cell, mirroring a
        single frame producing one piece of evidence per cell.
        """
        if len(cell_indices) == 0:
            return
        obs = np.asarray(observations, dtype=np.float64)
        if np.any(obs < 0) or np.any(~np.isfinite(obs)):
            raise InvalidDistribution("invalid batch observations")
        sums = obs.sum(axis=1)
        if np.any(sums <= 0):
            raise InvalidDistribution("zero-sum observation in batch")
        obs = obs / sums[:, None]

        dims = self.config.dims
        flat = (
            cell_indices[:, 0].astype(np.int64) * (dims[1] * dims[2])
            + cell_indices[:, 1] * dims[2]
            + cell_indices[:, 2]
        )
        uniq, inverse = np.unique(flat, return_inverse=True)
        log_obs = np.zeros((len(uniq), self.label_count))
        np.add.at(log_obs, inverse, np.log(np.maximum(obs, DEFAULT_LOG_EPSILON)))
        combined = np.exp(log_obs - log_obs.max(axis=1, keepdims=True))

        ii = uniq // (dims[1] * dims[2])
        jj = (uniq // dims[2]) % dims[1]
        kk = uniq % dims[2]
        stored = self.label_probs[ii, jj, kk].astype(np.float64)
        fresh = ~self.has_label[ii, jj, kk]
        stored = np.where(fresh[:, None], 1.0, np.maximum(stored, DEFAULT_LOG_EPSILON))
        prod = stored * combined
        totals = prod.sum(axis=1)
        if np.any(totals <= 0):
            raise InvalidDistribution("fusion produced a zero-sum distribution")
        self.label_probs[ii, jj, kk] = (prod / totals[:, None]).astype(np.float32)
        self.has_label[ii, jj, kk] = True

    # ------------------------------------------------------------------ queries

    def occupied_cells(self) -> OccupiedCells:
        """Cells above the occupancy threshold that carry a label."""
        cfg = self.config
        tau = np.log(cfg.occupied_threshold / (1.0 - cfg.occupied_threshold))
        mask = (self.log_odds > tau) & self.has_label
        idx = np.argwhere(mask)
        if len(idx) == 0:
            return OccupiedCells(
                indices=np.zeros((0, 3), np.int64),
                centers=np.zeros((0, 3)),
                colors=np.zeros((0, 3)),
                label_probs=np.zeros((0, self.label_count)),
            )
        world = self.cell_world_coords(idx)
        centers = (world + 0.5) * cfg.resolution
        i, j, k = idx.T
        counts = np.maximum(self.color_count[i, j, k], 1).astype(np.float64)
        colors = self.color_sum[i, j, k].astype(np.float64) / counts[:, None]
        probs = self.label_probs[i, j, k].astype(np.float64)
        return OccupiedCells(indices=idx, centers=centers, colors=colors, label_probs=probs)

    def project_to_image(
        self, pose: Pose, intrinsics: CameraIntrinsics, max_depth: float
    ) -> tuple[np.ndarray, np.ndarray]:
        """Render occupied labeled cells into a label image with a z-buffer.

        Pixels no cell reaches carry the UNLABELED sentinel; the returned
        depth buffer holds +inf there. Nearest cell wins collisions.
        """
        h, w = intrinsics.height, intrinsics.width
        label_img = np.full((h, w), UNLABELED, np.int32)
        depth_buf = np.full((h, w), np.inf, np.float32)
        occ = self.occupied_cells()
        if len(occ) == 0:
            return label_img, depth_buf

        cam_pts = (occ.centers - pose.translation) @ pose.rotation
        u, v, z = intrinsics.project(cam_pts)
        ok = (z > 0) & (z <= max_depth)
        ui = np.rint(u[ok]).astype(np.int64)
        vi = np.rint(v[ok]).astype(np.int64)
        zf = z[ok]
        labels = np.argmax(occ.label_probs[ok], axis=1)
        inb = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        ui, vi, zf, labels = ui[inb], vi[inb], zf[inb], labels[inb]
        # write farthest first so the nearest survives; ties resolved by the
        # stable pre-sort on cell order
        order = np.argsort(-zf, kind="stable")
        label_img[vi[order], ui[order]] = labels[order]
        depth_buf[vi[order], ui[order]] = zf[order]
        return label_img, depth_buf
