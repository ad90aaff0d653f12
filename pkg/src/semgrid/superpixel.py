"""SLIC superpixels and the clique structure they induce on CRF node sets.

Superpixels are localized k-means clusters in combined CIELAB + xy space with
grid-seeded centers, followed by a connectivity pass that relabels orphan
components to their largest neighboring superpixel. Segmentation is fully
deterministic: seeds come from the image geometry, never from a RNG.

Cliques link low-level nodes (pixels, or occupied grid cells) to at most one
auxiliary variable each. A clique's feature is the arithmetic mean of its
members' features and its unary cost the mean of their unaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from semgrid.core import CameraIntrinsics, Pose, SemgridError

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


class SeedError(SemgridError):
    """More superpixel seeds requested than pixels available."""


class ConsistencyError(SemgridError):
    """Frame data inconsistent with the grid state (stale pose)."""


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 255] -> CIELAB (D65)."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    c = np.where(c > 0.04045, ((c + 0.055) / 1.055) ** 2.4, c / 12.92)
    m = np.array(
        [
            [0.4124564, 0.3575761, 0.1804375],
            [0.2126729, 0.7151522, 0.0721750],
            [0.0193339, 0.1191920, 0.9503041],
        ]
    )
    xyz = c @ m.T
    xyz = xyz / np.array([0.95047, 1.0, 1.08883])
    f = np.where(xyz > 0.008856, np.cbrt(xyz), 7.787 * xyz + 16.0 / 116.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


@dataclass
class SuperpixelMap:
    labels: np.ndarray  # (H, W) int32, contiguous ids in [0, count)
    count: int
    mean_color: np.ndarray  # (count, 3) RGB
    mean_position: np.ndarray  # (count, 2) (x, y) pixel coordinates


@dataclass
class CliqueSet:
    """Partition of a node subset into cliques with aggregate features."""

    node_to_clique: np.ndarray  # (N,) int32, -1 when the node has no clique
    members: list  # per clique, array of member node indices
    positions: np.ndarray  # (C, d_p) mean member position
    colors: np.ndarray  # (C, 3) mean member color
    unaries: np.ndarray  # (C, L) mean member unary cost

    @property
    def count(self) -> int:
        return len(self.members)

    @staticmethod
    def empty(n_nodes: int, label_count: int = 0, position_dim: int = 0) -> "CliqueSet":
        return CliqueSet(
            node_to_clique=np.full(n_nodes, -1, np.int32),
            members=[],
            positions=np.zeros((0, position_dim)),
            colors=np.zeros((0, 3)),
            unaries=np.zeros((0, label_count)),
        )

    @classmethod
    def from_assignment(
        cls,
        assignment: np.ndarray,
        node_positions: np.ndarray,
        node_colors: np.ndarray,
        node_unaries: np.ndarray,
    ) -> "CliqueSet":
        assignment = np.asarray(assignment, dtype=np.int64)
        assigned = assignment >= 0
        ids = np.unique(assignment[assigned])
        remap = {int(s): c for c, s in enumerate(ids)}
        node_to_clique = np.full(assignment.shape[0], -1, np.int32)
        members = [None] * len(ids)
        for s, c in remap.items():
            m = np.nonzero(assignment == s)[0]
            members[c] = m
            node_to_clique[m] = c
        n_c = len(ids)
        positions = np.zeros((n_c, node_positions.shape[1]))
        colors = np.zeros((n_c, 3))
        unaries = np.zeros((n_c, node_unaries.shape[1]))
        for c, m in enumerate(members):
            positions[c] = node_positions[m].mean(axis=0)
            colors[c] = node_colors[m].mean(axis=0)
            unaries[c] = node_unaries[m].mean(axis=0)
        return cls(node_to_clique, members, positions, colors, unaries)


def _assign_pixels(lab, centers, step, ratio2, labels, min_dist):
    h, w = lab.shape[:2]
    for c in range(centers.shape[0]):
        cx, cy = centers[c, 0], centers[c, 1]
        x0 = max(int(cx - step), 0)
        x1 = min(int(cx + step) + 1, w)
        y0 = max(int(cy - step), 0)
        y1 = min(int(cy + step) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        win = lab[y0:y1, x0:x1]
        d_lab = np.sum((win - centers[c, 2:]) ** 2, axis=2)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        d_xy = (xs - cx) ** 2 + (ys - cy) ** 2
        d = d_lab + ratio2 * d_xy
        region = min_dist[y0:y1, x0:x1]
        better = d < region
        labels[y0:y1, x0:x1][better] = c
        region[better] = d[better]


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Relabel orphan components to their largest neighboring superpixel."""
    labels = labels.copy()
    for _ in range(64):
        changed = False
        sizes = np.bincount(labels.ravel())
        for sp in np.unique(labels):
            comp, n_comp = ndimage.label(labels == sp, structure=FOUR_CONNECTED)
            if n_comp <= 1:
                continue
            comp_sizes = np.bincount(comp.ravel())[1:]
            keep = int(np.argmax(comp_sizes)) + 1
            for ci in range(1, n_comp + 1):
                if ci == keep:
                    continue
                orphan = comp == ci
                ring = ndimage.binary_dilation(orphan, structure=FOUR_CONNECTED) & ~orphan
                neighbor_labels = np.unique(labels[ring])
                neighbor_labels = neighbor_labels[neighbor_labels != sp]
                if len(neighbor_labels) == 0:
                    continue
                # largest neighbor wins; ties break to the lowest id
                best = neighbor_labels[np.argmax(sizes[neighbor_labels])]
                labels[orphan] = best
                changed = True
        if not changed:
            return labels
    raise SemgridError("superpixel connectivity enforcement did not converge")


def slic(image: np.ndarray, target_count: int, compactness: float = 10.0, iterations: int = 10) -> SuperpixelMap:
    """Segment an RGB image into roughly target_count compact superpixels."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.size == 0:
        raise ValueError("expected a non-empty (H, W, 3) RGB image")
    h, w = img.shape[:2]
    if target_count < 1 or target_count > h * w:
        raise SeedError(f"cannot seed {target_count} superpixels in a {w}x{h} image")

    lab = rgb_to_lab(img)
    step = np.sqrt(w * h / target_count)
    nx = max(1, int(np.ceil(w / step)))
    ny = max(1, int(np.ceil(h / step)))

    centers = np.empty((nx * ny, 5))  # (x, y, L, a, b)
    c = 0
    for gy in range(ny):
        for gx in range(nx):
            x = (gx + 0.5) * w / nx
            y = (gy + 0.5) * h / ny
            centers[c, 0] = x
            centers[c, 1] = y
            centers[c, 2:] = lab[min(int(y), h - 1), min(int(x), w - 1)]
            c += 1

    ratio2 = (compactness / step) ** 2
    labels = np.full((h, w), -1, np.int32)
    search = 2.0 * step
    for _ in range(max(1, iterations)):
        min_dist = np.full((h, w), np.inf)
        labels.fill(-1)
        _assign_pixels(lab, centers, search, ratio2, labels, min_dist)
        # stranded pixels (possible when centers drift): nearest center globally
        stranded = labels < 0
        if np.any(stranded):
            ys, xs = np.nonzero(stranded)
            d_lab = np.sum((lab[ys, xs][:, None, :] - centers[None, :, 2:]) ** 2, axis=2)
            d_xy = (xs[:, None] - centers[None, :, 0]) ** 2 + (ys[:, None] - centers[None, :, 1]) ** 2
            labels[ys, xs] = np.argmin(d_lab + ratio2 * d_xy, axis=1)
        # update step
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=len(centers)).astype(np.float64)
        live = counts > 0
        ys, xs = np.mgrid[0:h, 0:w]
        sum_x = np.bincount(flat, weights=xs.ravel(), minlength=len(centers))
        sum_y = np.bincount(flat, weights=ys.ravel(), minlength=len(centers))
        centers[live, 0] = sum_x[live] / counts[live]
        centers[live, 1] = sum_y[live] / counts[live]
        for ch in range(3):
            s = np.bincount(flat, weights=lab[..., ch].ravel(), minlength=len(centers))
            centers[live, 2 + ch] = s[live] / counts[live]

    labels = _enforce_connectivity(labels)

    ids = np.unique(labels)
    remap = np.zeros(ids.max() + 1, np.int32)
    remap[ids] = np.arange(len(ids), dtype=np.int32)
    labels = remap[labels]
    count = len(ids)

    flat = labels.ravel()
    counts = np.bincount(flat, minlength=count).astype(np.float64)
    ys, xs = np.mgrid[0:h, 0:w]
    mean_position = np.stack(
        [
            np.bincount(flat, weights=xs.ravel(), minlength=count) / counts,
            np.bincount(flat, weights=ys.ravel(), minlength=count) / counts,
        ],
        axis=1,
    )
    mean_color = np.stack(
        [np.bincount(flat, weights=img[..., ch].ravel(), minlength=count) / counts for ch in range(3)],
        axis=1,
    )
    return SuperpixelMap(labels=labels, count=count, mean_color=mean_color, mean_position=mean_position)


def pixel_features(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-major per-pixel (x, y) positions and RGB colors for a 2D CRF."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    positions = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    return positions, img.reshape(-1, 3)


def build_cliques_2d(sp: SuperpixelMap, node_positions, node_colors, node_unaries) -> CliqueSet:
    """One clique per superpixel over the row-major pixel node set."""
    n = sp.labels.size
    if len(node_positions) != n or len(node_unaries) != n or len(node_colors) != n:
        raise ValueError("node arrays do not match the superpixel map size")
    return CliqueSet.from_assignment(
        sp.labels.ravel(), np.asarray(node_positions), np.asarray(node_colors), np.asarray(node_unaries)
    )


def build_cliques_3d(
    sp: SuperpixelMap,
    depth: np.ndarray,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    grid,
    nodes,
    node_unaries: np.ndarray,
    sky_mask: np.ndarray | None = None,
) -> CliqueSet:
    """Transfer pixel-superpixel membership to occupied grid cells.

    Each valid-depth non-sky pixel back-projects to the cell containing its
    endpoint; a cell claimed by several superpixels joins the majority
    claimant (ties to the lowest superpixel id). Unclaimed nodes keep no
    parent clique and participate only in the unary + pairwise terms.
    """
    cam_cell = grid.world_to_cell(pose.translation)
    if cam_cell is None:
        raise ConsistencyError("camera pose lies outside the current grid box")
    h, w = intrinsics.height, intrinsics.width
    depth = np.asarray(depth)
    if depth.shape != (h, w) or sp.labels.shape != (h, w):
        raise ConsistencyError("depth or superpixel map does not match the camera dimensions")

    n_nodes = len(nodes)
    assignment = np.full(n_nodes, -1, np.int64)
    valid = np.isfinite(depth) & (depth > 0)
    if sky_mask is not None:
        valid &= ~np.asarray(sky_mask, dtype=bool)
    vv, uu = np.nonzero(valid)
    if len(vv) == 0 or n_nodes == 0:
        return CliqueSet.from_assignment(
            assignment, nodes.centers, nodes.colors, np.asarray(node_unaries)
        )

    pts = pose.transform(intrinsics.back_project(uu.astype(np.float64), vv.astype(np.float64), depth[vv, uu]))
    cfg = grid.config
    dims = np.asarray(cfg.dims)
    local = np.floor((pts - grid.origin) / cfg.resolution).astype(np.int64)
    inside = np.all((local >= 0) & (local < dims), axis=1)
    storage = (grid.origin_cell + local[inside]) % dims
    flat = storage[:, 0] * (dims[1] * dims[2]) + storage[:, 1] * dims[2] + storage[:, 2]

    node_lookup = np.full(int(np.prod(dims)), -1, np.int64)
    node_flat = (
        nodes.indices[:, 0] * (dims[1] * dims[2])
        + nodes.indices[:, 1] * dims[2]
        + nodes.indices[:, 2]
    )
    node_lookup[node_flat] = np.arange(n_nodes)

    node_idx = node_lookup[flat]
    claims_node = node_idx[node_idx >= 0]
    claims_sp = sp.labels[vv, uu][inside][node_idx >= 0].astype(np.int64)
    if len(claims_node) == 0:
        return CliqueSet.from_assignment(
            assignment, nodes.centers, nodes.colors, np.asarray(node_unaries)
        )

    pairs = claims_node * (sp.count + 1) + claims_sp
    uniq, counts = np.unique(pairs, return_counts=True)
    u_node = uniq // (sp.count + 1)
    u_sp = uniq % (sp.count + 1)
    # majority claimant per node, ties to the lowest superpixel id
    order = np.lexsort((u_sp, -counts, u_node))
    first = np.unique(u_node[order], return_index=True)[1]
    winners = order[first]
    assignment[u_node[winners]] = u_sp[winners]

    return CliqueSet.from_assignment(assignment, nodes.centers, nodes.colors, np.asarray(node_unaries))
