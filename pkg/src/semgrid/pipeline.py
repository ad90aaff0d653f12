"""End-to-end orchestration for the CLI: 2D inference, the incremental 3D
mapping loop, evaluation, and map export.

Every run is deterministic: iteration orders are fixed, superpixel seeding is
grid-based, and no step consumes wall-clock time or RNG state. Output files
are bit-identical across runs on identical inputs (per-iteration wall times
stay in memory and are deliberately left out of the diagnostics files).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from semgrid import io as sio
from semgrid.core import CameraIntrinsics, KernelParams, Pose, neg_log
from semgrid.crf import (
    EXACT,
    EXPECTATION,
    LATTICE,
    MAP_HARDENED,
    CrfProblem,
    HierarchyParams,
    infer,
)
from semgrid.grid import UNLABELED, GridConfig, ScrollGrid
from semgrid.io import FileFormatError, LabelTable
from semgrid.metrics import ConfusionMatrix, accumulate, summarize
from semgrid.superpixel import CliqueSet, build_cliques_2d, build_cliques_3d, pixel_features, slic

MODELS = ("unary", "dense", "pn", "hier")


@dataclass
class PipelineConfig:
    label_table: LabelTable
    grid: GridConfig = field(default_factory=lambda: GridConfig(dims=(250, 250, 80), resolution=0.1))
    kernel_2d: KernelParams = field(default_factory=lambda: KernelParams(
        w1=5.0, w2=3.0, theta_alpha=60.0, theta_beta=10.0, theta_gamma=3.0))
    kernel_3d: KernelParams = field(default_factory=lambda: KernelParams(
        w1=5.0, w2=3.0, theta_alpha=0.5, theta_beta=10.0, theta_gamma=0.3))
    clique_kernel_2d: KernelParams = field(default_factory=lambda: KernelParams(
        w1=1.0, w2=1.0, theta_alpha=60.0, theta_beta=10.0, theta_gamma=20.0))
    clique_kernel_3d: KernelParams = field(default_factory=lambda: KernelParams(
        w1=1.0, w2=1.0, theta_alpha=1.0, theta_beta=10.0, theta_gamma=0.6))
    consistency_cost: float = 1.0
    pn_consistency_scale: float = 10.0  # the rigid-consistency variant's multiplier
    use_free_label: bool = False
    free_label_cost: float = 10.0
    clique_mode: str = EXPECTATION
    slic_target: int = 150
    slic_compactness: float = 10.0
    slic_iterations: int = 10
    iterations: int = 5
    convergence_delta: float = 0.0
    backend: str = LATTICE
    stride: int = 1
    projection_max_depth: float = 40.0
    max_range: float = 25.0
    calib_path: Optional[Path] = None
    poses_path: Optional[Path] = None

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be at least 1")
        if self.backend not in (LATTICE, EXACT):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.clique_mode not in (EXPECTATION, MAP_HARDENED):
            raise ValueError(f"unknown clique mode {self.clique_mode!r}")

    def require_sky(self) -> int:
        if self.label_table.sky_id is None:
            raise FileFormatError("3D mapping needs a sky label in the label table")
        return self.label_table.sky_id

    def hierarchy(self, model: str, is_3d: bool) -> HierarchyParams:
        ck = self.clique_kernel_3d if is_3d else self.clique_kernel_2d
        if model == "pn":
            return HierarchyParams(
                consistency_cost=self.consistency_cost * self.pn_consistency_scale,
                clique_kernel_params=ck,
                clique_update_mode=MAP_HARDENED,
            )
        return HierarchyParams(
            consistency_cost=self.consistency_cost,
            clique_kernel_params=ck,
            use_free_label=self.use_free_label,
            free_label_cost=self.free_label_cost,
            clique_update_mode=self.clique_mode,
        )


def _parse_kernel(cfg: dict, prefix: str, default: KernelParams) -> KernelParams:
    def get(name, fallback):
        return float(cfg.get(f"{prefix}_{name}", fallback))

    return KernelParams(
        w1=get("w1", default.w1),
        w2=get("w2", default.w2),
        theta_alpha=get("theta_alpha", default.theta_alpha),
        theta_beta=get("theta_beta", default.theta_beta),
        theta_gamma=get("theta_gamma", default.theta_gamma),
    )


def load_pipeline_config(path, overrides: Optional[dict] = None) -> PipelineConfig:
    """Build a PipelineConfig from a key=value file plus CLI overrides."""
    path = Path(path)
    cfg = sio.parse_config_file(path)
    if overrides:
        cfg.update({k: str(v) for k, v in overrides.items() if v is not None})
    base = path.parent

    def resolve(name):
        return (base / cfg[name]).resolve() if name in cfg else None

    if "labels" not in cfg:
        raise FileFormatError(f"{path}: missing required key 'labels'")
    table = LabelTable.load(base / cfg["labels"])

    defaults = PipelineConfig(label_table=table)
    dims = tuple(int(v) for v in cfg.get("grid_dims", "250 250 80").split())
    anchor = tuple(float(v) for v in cfg.get("anchor_fraction", "0.5 0.5 0.25").split())
    grid = GridConfig(
        dims=dims,
        resolution=float(cfg.get("grid_resolution", 0.1)),
        occupied_threshold=float(cfg.get("occupied_threshold", 0.7)),
        log_odds_hit=float(cfg.get("log_odds_hit", 0.85)),
        log_odds_miss=float(cfg.get("log_odds_miss", -0.4)),
        log_odds_min=float(cfg.get("log_odds_min", -3.5)),
        log_odds_max=float(cfg.get("log_odds_max", 3.5)),
        anchor_fraction=anchor,
        dedup_hits=cfg.get("dedup_hits", "0") == "1",
    )
    return PipelineConfig(
        label_table=table,
        grid=grid,
        kernel_2d=_parse_kernel(cfg, "kernel2d", defaults.kernel_2d),
        kernel_3d=_parse_kernel(cfg, "kernel3d", defaults.kernel_3d),
        clique_kernel_2d=_parse_kernel(cfg, "clique2d", defaults.clique_kernel_2d),
        clique_kernel_3d=_parse_kernel(cfg, "clique3d", defaults.clique_kernel_3d),
        consistency_cost=float(cfg.get("consistency_cost", 1.0)),
        pn_consistency_scale=float(cfg.get("pn_consistency_scale", 10.0)),
        use_free_label=cfg.get("free_label", "0") == "1",
        free_label_cost=float(cfg.get("free_label_cost", 10.0)),
        clique_mode=cfg.get("clique_mode", EXPECTATION),
        slic_target=int(cfg.get("slic_target", 150)),
        slic_compactness=float(cfg.get("slic_compactness", 10.0)),
        slic_iterations=int(cfg.get("slic_iterations", 10)),
        iterations=int(cfg.get("iterations", 5)),
        convergence_delta=float(cfg.get("convergence_delta", 0.0)),
        backend=cfg.get("backend", LATTICE),
        stride=int(cfg.get("stride", 1)),
        projection_max_depth=float(cfg.get("projection_max_depth", 40.0)),
        max_range=float(cfg.get("max_range", 25.0)),
        calib_path=resolve("calib"),
        poses_path=resolve("poses"),
    )


def _write_diagnostics(path, rows) -> None:
    lines = ["frame\titeration\tmap_energy\tmax_delta"]
    for frame, diags in rows:
        for d in diags:
            lines.append(f"{frame}\t{d.iteration}\t{d.map_energy:.9g}\t{d.max_delta:.9g}")
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------- infer2d


def build_2d_problem(config: PipelineConfig, image: np.ndarray, unary_probs: np.ndarray,
                     model: str):
    """Assemble the pixel-graph CRF for one image; returns (problem, sp).

    ``sp`` is the superpixel map when the model uses cliques, else None.
    """
    h, w, l = unary_probs.shape
    positions, colors = pixel_features(image)
    costs = neg_log(unary_probs.reshape(-1, l))
    sp = None
    if model == "dense":
        cliques = CliqueSet.empty(h * w, label_count=l, position_dim=2)
    else:
        sp = slic(image, config.slic_target, config.slic_compactness, config.slic_iterations)
        cliques = build_cliques_2d(sp, positions, colors, costs)
    problem = CrfProblem(
        node_unaries=costs,
        node_positions=positions,
        node_colors=colors,
        kernel_params=config.kernel_2d,
        cliques=cliques,
        hierarchy=config.hierarchy(model, is_3d=False),
        label_count=l,
    )
    return problem, sp


def infer2d(config: PipelineConfig, image: np.ndarray, unary_probs: np.ndarray,
            model: str = "hier"):
    """2D semantic segmentation with the selected CRF variant.

    Returns (label image, per-iteration diagnostics). ``unary`` skips
    optimization entirely; ``dense`` runs without cliques; ``pn`` hardens
    clique consistency; ``hier`` is the full hierarchical model.
    """
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")
    h, w, l = unary_probs.shape
    if image.shape[:2] != (h, w):
        raise FileFormatError(f"image {image.shape[:2]} vs unary {(h, w)}")

    if model == "unary":
        return np.argmax(unary_probs, axis=2).astype(np.int32), []

    problem, _ = build_2d_problem(config, image, unary_probs, model)
    result, diags = infer(
        problem,
        max_iterations=config.iterations,
        convergence_delta=config.convergence_delta,
        backend=config.backend,
        record_energy=False,
    )
    labels = np.argmax(result.q_nodes, axis=1).astype(np.int32).reshape(h, w)
    return labels, diags


def cmd_infer2d(config: PipelineConfig, image_path, unary_path, out_dir,
                model: str = "hier", truth_path=None, dump_superpixels: bool = False) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image = sio.read_image_png(image_path)
    unary = sio.read_unary(unary_path)
    labels, diags = infer2d(config, image, unary, model=model)
    stem = Path(image_path).stem
    sio.write_label_png(out / f"{stem}_labels.png", labels, config.label_table)
    _write_diagnostics(out / f"{stem}_diag.txt", [(0, diags)])
    if dump_superpixels and model in ("pn", "hier"):
        sp = slic(image, config.slic_target, config.slic_compactness, config.slic_iterations)
        sio.write_pgm16(out / f"{stem}_superpixels.pgm", sp.labels)
    if truth_path is not None:
        truth = sio.read_label_png(truth_path, config.label_table)
        cm = accumulate(ConfusionMatrix.zeros(config.label_table.label_count), truth, labels)
        _write_metric_report(out / f"{stem}_metrics", cm, config.label_table)
    return 0


# --------------------------------------------------------------------- map3d


@dataclass
class FrameBundle:
    index: int
    rgb_path: Path
    depth_path: Path
    unary_path: Path
    truth_path: Optional[Path]


def read_manifest(path) -> list[FrameBundle]:
    """Frame list: ``index rgb depth unary [truth]`` per line, '-' = no truth."""
    path = Path(path)
    base = path.parent
    frames = []
    for line_no, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (4, 5):
            raise FileFormatError(f"{path}:{line_no}: expected 'index rgb depth unary [truth]'")
        truth = None
        if len(parts) == 5 and parts[4] != "-":
            truth = base / parts[4]
        frames.append(FrameBundle(
            index=int(parts[0]),
            rgb_path=base / parts[1],
            depth_path=base / parts[2],
            unary_path=base / parts[3],
            truth_path=truth,
        ))
    order = [f.index for f in frames]
    if order != sorted(order):
        raise FileFormatError(f"{path}: frames must be listed in index order")
    return frames


@dataclass
class Map3dResult:
    frames_processed: int
    grid: ScrollGrid
    projection_paths: list
    archive_path: Path
    state_path: Optional[Path]


def run_map3d(config: PipelineConfig, manifest_path, out_dir,
              state_in=None, state_out=None, frame_range=None) -> Map3dResult:
    """The incremental mapping loop over every stride-th manifest frame.

    Each processed frame recenters the grid on the camera, integrates depth
    with sky pixels excluded, fuses the frame's label observations per hit
    cell, rebuilds superpixel cliques, refines the occupied cells' labels by
    mean-field inference, and writes the optimized marginals back. Evicted
    cells stream to an append-only archive so the full trajectory can be
    exported later.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sky_id = config.require_sky()
    if config.poses_path is None or config.calib_path is None:
        raise FileFormatError("map3d needs 'poses' and 'calib' in the config")

    frames = read_manifest(manifest_path)
    if not frames:
        # empty manifest: empty map, success
        empty = ScrollGrid(config.grid, config.label_table.label_count)
        archive_path = out / "evicted.bin"
        archive_path.touch()
        _export_grid(config, empty, None, out)
        return Map3dResult(0, empty, [], archive_path, None)
    if frame_range is not None:
        frames = frames[frame_range[0]:frame_range[1]]

    poses = sio.read_poses(config.poses_path)
    first_img = sio.read_image_png(frames[0].rgb_path)
    h, w = first_img.shape[:2]
    intr = sio.read_calibration(config.calib_path, width=w, height=h)

    l_count = config.label_table.label_count
    archive_path = out / "evicted.bin"
    archive = sio.ArchiveWriter(archive_path, l_count, append=state_in is not None)
    grid = ScrollGrid(config.grid, l_count, evicted_sink=archive)
    if state_in is not None:
        sio.load_grid_state(state_in, grid)

    projection_paths = []
    diag_rows = []
    processed = 0
    try:
        for pos_in_list, frame in enumerate(frames):
            if pos_in_list % config.stride != 0:
                continue
            if frame.index >= len(poses):
                raise FileFormatError(
                    f"frame {frame.index}: no pose line {frame.index} in {config.poses_path}")
            pose = poses[frame.index]
            image = sio.read_image_png(frame.rgb_path)
            if image.shape[:2] != (h, w):
                raise FileFormatError(f"frame {frame.index}: image size changed mid-sequence")
            depth = sio.load_depth_any(frame.depth_path, intr)
            unary = sio.read_unary(frame.unary_path)
            if unary.shape != (h, w, l_count):
                raise FileFormatError(
                    f"frame {frame.index}: unary shape {unary.shape} vs expected {(h, w, l_count)}")

            grid.recenter(pose.translation)
            sky_mask = np.argmax(unary, axis=2) == sky_id
            stats = grid.integrate_depth_frame(
                depth, image, pose, intr, sky_mask,
                max_range=config.max_range, frame_index=frame.index,
            )
            if len(stats.hit_cells):
                obs = unary[stats.hit_pixels[:, 0], stats.hit_pixels[:, 1]]
                grid.fuse_observations(stats.hit_cells, obs)

            occ = grid.occupied_cells()
            if len(occ) > 1:
                node_unaries = neg_log(occ.label_probs)
                sp = slic(image, config.slic_target, config.slic_compactness,
                          config.slic_iterations)
                cliques = build_cliques_3d(sp, depth, pose, intr, grid, occ,
                                           node_unaries, sky_mask=sky_mask)
                problem = CrfProblem(
                    node_unaries=node_unaries,
                    node_positions=occ.centers,
                    node_colors=occ.colors,
                    kernel_params=config.kernel_3d,
                    cliques=cliques,
                    hierarchy=config.hierarchy("hier", is_3d=True),
                    label_count=l_count,
                )
                result, diags = infer(
                    problem,
                    max_iterations=config.iterations,
                    convergence_delta=config.convergence_delta,
                    backend=config.backend,
                    record_energy=False,
                )
                i, j, k = occ.indices.T
                grid.label_probs[i, j, k] = result.q_nodes.astype(np.float32)
                diag_rows.append((frame.index, diags))

            label_img, _ = grid.project_to_image(pose, intr, config.projection_max_depth)
            proj_path = out / f"proj_{frame.index:06d}.png"
            sio.write_label_png(proj_path, label_img, config.label_table)
            projection_paths.append(proj_path)
            processed += 1
    finally:
        archive.close()

    _write_diagnostics(out / "diagnostics.txt", diag_rows)
    state_path = None
    if state_out is not None:
        state_path = Path(state_out)
        sio.save_grid_state(state_path, grid)
    _export_grid(config, grid, archive_path, out)
    return Map3dResult(processed, grid, projection_paths, archive_path, state_path)


# -------------------------------------------------------------------- export


def _export_grid(config: PipelineConfig, grid: ScrollGrid, archive_path, out_dir) -> None:
    """Two PLY maps: palette-colored by argmax label and fused-RGB-colored."""
    out = Path(out_dir)
    occ = grid.occupied_cells()
    points = [occ.centers]
    labels = [np.argmax(occ.label_probs, axis=1) if len(occ) else np.zeros(0, np.int64)]
    rgb = [occ.colors]

    if archive_path is not None and Path(archive_path).exists():
        coords, log_odds, color_sum, color_count, dists = sio.read_archive(
            archive_path, config.label_table.label_count)
        cfg = grid.config
        tau = np.log(cfg.occupied_threshold / (1.0 - cfg.occupied_threshold))
        keep = (log_odds > tau) & (dists.sum(axis=1) > 0)
        points.append((coords[keep] + 0.5) * cfg.resolution)
        labels.append(np.argmax(dists[keep], axis=1))
        rgb.append(color_sum[keep] / np.maximum(color_count[keep], 1)[:, None])

    pts = np.concatenate(points, axis=0)
    lab = np.concatenate(labels, axis=0)
    col = np.concatenate(rgb, axis=0) if pts.size else np.zeros((0, 3))
    palette_colors = (
        config.label_table.palette[lab] if len(lab) else np.zeros((0, 3), np.uint8)
    )
    sio.write_ply(out / "map_labels.ply", pts, palette_colors)
    sio.write_ply(out / "map_rgb.ply", pts, col)


def cmd_export(config: PipelineConfig, state_path, out_dir, archive_path=None) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = ScrollGrid(config.grid, config.label_table.label_count)
    sio.load_grid_state(state_path, grid)
    _export_grid(config, grid, archive_path, out)
    return 0


# ---------------------------------------------------------------------- eval


def _write_metric_report(stem_path, cm: ConfusionMatrix, table: LabelTable) -> None:
    s = summarize(cm)
    stem = Path(stem_path)
    name_w = max(len(n) for n in table.names) + 2
    lines = [
        f"{'class':<{name_w}}{'acc_recall':>12}{'acc_precision':>15}{'iou':>12}",
    ]
    for i, name in enumerate(table.names):
        if s.present[i]:
            lines.append(
                f"{name:<{name_w}}{s.per_class_recall[i]:>12.4f}"
                f"{s.per_class_precision[i]:>15.4f}{s.per_class_iou[i]:>12.4f}"
            )
        else:
            lines.append(f"{name:<{name_w}}{'absent':>12}{'':>15}{'':>12}")
    lines += [
        "",
        f"mean acc (recall)    {s.mean_recall:.4f}",
        f"mean acc (precision) {s.mean_precision:.4f}",
        f"mean IoU             {s.mean_iou:.4f}",
        f"F.W. IoU             {s.fw_iou:.4f}",
        f"global accuracy      {s.global_accuracy:.4f}",
        f"pixels counted       {s.counted_pixels}",
        f"pixels ignored       {s.ignored_pixels}",
    ]
    stem.with_suffix(".txt").write_text("\n".join(lines) + "\n")

    rows = ["class\tacc_recall\tacc_precision\tiou\tpresent"]
    for i, name in enumerate(table.names):
        rows.append(
            f"{name}\t{s.per_class_recall[i]:.9g}\t{s.per_class_precision[i]:.9g}"
            f"\t{s.per_class_iou[i]:.9g}\t{int(s.present[i])}"
        )
    rows.append(f"__mean__\t{s.mean_recall:.9g}\t{s.mean_precision:.9g}\t{s.mean_iou:.9g}\t-")
    rows.append(f"__fw_iou__\t{s.fw_iou:.9g}\t-\t-\t-")
    rows.append(f"__global__\t{s.global_accuracy:.9g}\t-\t-\t-")
    stem.with_suffix(".tsv").write_text("\n".join(rows) + "\n")


def cmd_eval(config: PipelineConfig, pred_dir, truth_dir, out_dir) -> int:
    """Accumulate metrics over matching file names in two directories."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    preds = {p.name: p for p in sorted(Path(pred_dir).glob("*.png"))}
    truths = {p.name: p for p in sorted(Path(truth_dir).glob("*.png"))}
    common = sorted(set(preds) & set(truths))
    missing = sorted(set(preds) ^ set(truths))
    if not common:
        raise FileFormatError("no matching prediction/truth file names")

    cm = ConfusionMatrix.zeros(config.label_table.label_count)
    for name in common:
        truth = sio.read_label_png(truths[name], config.label_table)
        pred = sio.read_label_png(preds[name], config.label_table)
        accumulate(cm, truth, pred)
    _write_metric_report(out / "report", cm, config.label_table)
    if missing:
        (out / "missing_pairs.txt").write_text("\n".join(missing) + "\n")
        return 3
    return 0
