"""On-disk formats for the pipeline.

Binary formats are little-endian and bit-exact:

- unary maps   magic ``UNRY`` | uint32 W, H, L | W*H*L float32 probabilities,
               pixel-major row-major, label-minor; per-pixel sums must be
               1 within 1e-3
- depth maps   magic ``DPTH`` | uint32 W, H | W*H float32 meters
- disparity    magic ``DISP`` | uint32 W, H | W*H float32 pixels; converted
               on load via depth = fx * baseline / disparity, non-positive
               disparity -> invalid (NaN)
- archives     append-only records of evicted cells: int32 cell coords x3,
               float32 log_odds, float32 color_sum x3, uint32 color_count,
               float32 label distribution xL (L comes from the label table)
- PLY          binary_little_endian 1.0, one vertex per cell: float32 x,y,z
               and uchar red, green, blue

Text formats: poses are one line of 12 floats per frame (row-major 3x4
world-from-camera, the KITTI odometry convention); calibration is a single
line ``fx fy cx cy baseline``; label tables are ``id name r g b is_sky``
rows; configs are ``key = value`` lines with ``#`` comments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from semgrid.core import CameraIntrinsics, Pose, SemgridError
from semgrid.grid import UNLABELED

DEFAULT_UNLABELED_COLOR = (128, 128, 128)


class FileFormatError(SemgridError):
    """Malformed or inconsistent input file."""


# ------------------------------------------------------------------- palettes


@dataclass
class LabelTable:
    names: list
    palette: np.ndarray  # (L, 3) uint8
    sky_id: Optional[int]
    unlabeled_color: tuple = DEFAULT_UNLABELED_COLOR

    @property
    def label_count(self) -> int:
        return len(self.names)

    @staticmethod
    def load(path) -> "LabelTable":
        names = {}
        colors = {}
        sky_id = None
        for line_no, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise FileFormatError(f"{path}:{line_no}: expected 'id name r g b is_sky'")
            idx = int(parts[0])
            names[idx] = parts[1]
            colors[idx] = tuple(int(v) for v in parts[2:5])
            if parts[5] not in ("0", "1"):
                raise FileFormatError(f"{path}:{line_no}: is_sky must be 0 or 1")
            if parts[5] == "1":
                if sky_id is not None:
                    raise FileFormatError(f"{path}: multiple sky labels")
                sky_id = idx
        if not names:
            raise FileFormatError(f"{path}: empty label table")
        if sorted(names) != list(range(len(names))):
            raise FileFormatError(f"{path}: label ids must be contiguous from 0")
        ordered = [names[i] for i in range(len(names))]
        palette = np.array([colors[i] for i in range(len(names))], np.uint8)
        return LabelTable(names=ordered, palette=palette, sky_id=sky_id)

    def save(self, path) -> None:
        lines = []
        for i, name in enumerate(self.names):
            r, g, b = (int(v) for v in self.palette[i])
            sky = 1 if self.sky_id == i else 0
            lines.append(f"{i} {name} {r} {g} {b} {sky}")
        Path(path).write_text("\n".join(lines) + "\n")


def write_label_png(path, labels: np.ndarray, table: LabelTable) -> None:
    """Palette-colored label image; UNLABELED pixels take the sentinel gray."""
    lab = np.asarray(labels)
    rgb = np.empty(lab.shape + (3,), np.uint8)
    rgb[...] = np.asarray(table.unlabeled_color, np.uint8)
    known = lab >= 0
    rgb[known] = table.palette[lab[known]]
    Image.fromarray(rgb, mode="RGB").save(path)


def read_label_png(path, table: LabelTable) -> np.ndarray:
    """Invert a palette-colored label image; unknown colors map to UNLABELED."""
    rgb = np.asarray(Image.open(path).convert("RGB"))
    flat = (
        rgb[..., 0].astype(np.int64) * 65536
        + rgb[..., 1].astype(np.int64) * 256
        + rgb[..., 2].astype(np.int64)
    )
    lookup = {}
    for i, (r, g, b) in enumerate(table.palette.astype(np.int64)):
        lookup[int(r * 65536 + g * 256 + b)] = i
    out = np.full(rgb.shape[:2], UNLABELED, np.int32)
    for key, idx in lookup.items():
        out[flat == key] = idx
    return out


def write_image_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.clip(np.asarray(image), 0, 255).astype(np.uint8), mode="RGB").save(path)


def read_image_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)


# ------------------------------------------------------------- binary buffers


def _read_header(fh, magic: str, n_dims: int, path) -> tuple:
    got = fh.read(4)
    if got != magic.encode():
        raise FileFormatError(f"{path}: expected magic {magic!r}, got {got!r}")
    raw = fh.read(4 * n_dims)
    if len(raw) != 4 * n_dims:
        raise FileFormatError(f"{path}: truncated header")
    return struct.unpack("<" + "I" * n_dims, raw)


def write_unary(path, probs: np.ndarray) -> None:
    """(H, W, L) float probabilities -> UNRY file."""
    p = np.ascontiguousarray(probs, dtype=np.float32)
    h, w, l = p.shape
    with open(path, "wb") as fh:
        fh.write(b"UNRY")
        fh.write(struct.pack("<III", w, h, l))
        fh.write(p.tobytes())


def read_unary(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h, l = _read_header(fh, "UNRY", 3, path)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h * l:
        raise FileFormatError(f"{path}: expected {w * h * l} floats, found {data.size}")
    probs = data.reshape(h, w, l).astype(np.float64)
    sums = probs.sum(axis=2)
    if np.any(np.abs(sums - 1.0) > 1e-3):
        worst = float(np.abs(sums - 1.0).max())
        raise FileFormatError(f"{path}: per-pixel sums off by {worst:.2e} (> 1e-3)")
    return probs


def write_depth(path, depth: np.ndarray, magic: str = "DPTH") -> None:
    d = np.ascontiguousarray(depth, dtype=np.float32)
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(magic.encode())
        fh.write(struct.pack("<II", w, h))
        fh.write(d.tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_header(fh, "DPTH", 2, path)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h:
        raise FileFormatError(f"{path}: expected {w * h} floats, found {data.size}")
    return data.reshape(h, w).astype(np.float64)


def write_disparity(path, disparity: np.ndarray) -> None:
    write_depth(path, disparity, magic="DISP")


def read_disparity(path, fx: float, baseline: float) -> np.ndarray:
    """Disparity map -> depth in meters; non-positive disparity -> NaN."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, "DISP", 2, path)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h:
        raise FileFormatError(f"{path}: expected {w * h} floats, found {data.size}")
    disp = data.reshape(h, w).astype(np.float64)
    depth = np.full_like(disp, np.nan)
    ok = disp > 0
    depth[ok] = fx * baseline / disp[ok]
    return depth


def load_depth_any(path, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Dispatch on the magic bytes: DPTH loads directly, DISP converts."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"DPTH":
        return read_depth(path)
    if magic == b"DISP":
        return read_disparity(path, intrinsics.fx, intrinsics.baseline)
    raise FileFormatError(f"{path}: unknown depth format {magic!r}")


# ------------------------------------------------------------ poses and calib


def read_poses(path) -> list[Pose]:
    poses = []
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 12:
            raise FileFormatError(f"{path}:{line_no}: expected 12 floats, got {len(vals)}")
        m = np.array(vals).reshape(3, 4)
        try:
            poses.append(Pose(m[:, :3], m[:, 3]))
        except ValueError as exc:
            raise FileFormatError(f"{path}:{line_no}: {exc}") from exc
    return poses


def write_poses(path, poses) -> None:
    lines = []
    for p in poses:
        m = np.concatenate([p.rotation, p.translation[:, None]], axis=1)
        lines.append(" ".join(f"{v:.12g}" for v in m.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_calibration(path, width: int, height: int) -> CameraIntrinsics:
    vals = Path(path).read_text().split()
    if len(vals) != 5:
        raise FileFormatError(f"{path}: expected 'fx fy cx cy baseline'")
    fx, fy, cx, cy, baseline = (float(v) for v in vals)
    return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, baseline=baseline,
                            width=width, height=height)


def write_calibration(path, intr: CameraIntrinsics) -> None:
    Path(path).write_text(f"{intr.fx} {intr.fy} {intr.cx} {intr.cy} {intr.baseline}\n")


# ------------------------------------------------------------------- archives


class ArchiveWriter:
    """Appends evicted-cell records; usable as a ScrollGrid eviction sink."""

    def __init__(self, path, label_count: int, append: bool = False):
        self.label_count = label_count
        self._fh = open(path, "ab" if append else "wb")

    def __call__(self, world_cell, cell) -> None:
        dist = cell.label_dist
        if dist is None:
            dist = np.zeros(self.label_count)
        rec = struct.pack(
            "<iiif3fI",
            int(world_cell[0]), int(world_cell[1]), int(world_cell[2]),
            float(cell.log_odds),
            float(cell.color_sum[0]), float(cell.color_sum[1]), float(cell.color_sum[2]),
            int(cell.color_count),
        )
        self._fh.write(rec + np.asarray(dist, dtype="<f4").tobytes())

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _archive_dtype(label_count: int) -> np.dtype:
    return np.dtype([
        ("coord", "<i4", 3),
        ("log_odds", "<f4"),
        ("color_sum", "<f4", 3),
        ("color_count", "<u4"),
        ("dist", "<f4", label_count),
    ])


def read_archive(path, label_count: int):
    """All records as arrays: coords, log_odds, color_sum, color_count, dists."""
    dt = _archive_dtype(label_count)
    raw = Path(path).read_bytes()
    if len(raw) % dt.itemsize != 0:
        raise FileFormatError(f"{path}: size {len(raw)} is not a multiple of {dt.itemsize}")
    rec = np.frombuffer(raw, dtype=dt)
    return (
        rec["coord"].astype(np.int64),
        rec["log_odds"].astype(np.float64),
        rec["color_sum"].astype(np.float64),
        rec["color_count"].astype(np.int64),
        rec["dist"].astype(np.float64),
    )


# ------------------------------------------------------------------------ PLY


def write_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """Binary little-endian PLY: float32 x,y,z + uchar r,g,b per vertex."""
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    cols = np.asarray(colors).reshape(-1, 3)
    if len(pts) != len(cols):
        raise ValueError("points and colors disagree in length")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    dt = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
    rec = np.empty(len(pts), dt)
    rec["xyz"] = pts
    rec["rgb"] = np.clip(cols, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(rec.tobytes())


def read_ply(path):
    """Reads the subset of PLY produced by write_ply (for verification)."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode()
    n = None
    for line in header.splitlines():
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    if n is None:
        raise FileFormatError(f"{path}: missing vertex element")
    dt = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
    rec = np.frombuffer(raw[end:], dtype=dt, count=n)
    return rec["xyz"].astype(np.float64), rec["rgb"].copy()


# ------------------------------------------------------------------------ PGM


def write_pgm16(path, values: np.ndarray) -> None:
    """16-bit grayscale PGM (big-endian per the format), for superpixel maps."""
    v = np.asarray(values)
    if v.min() < 0 or v.max() > 65535:
        raise ValueError("values outside uint16 range")
    h, w = v.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(v.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"65535":
        raise FileFormatError(f"{path}: not a 16-bit P5 PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2", count=w * h).reshape(h, w).astype(np.int64)


# --------------------------------------------------------------------- config


def parse_config_file(path) -> dict:
    """key = value lines; '#' starts a comment; values keep internal spaces."""
    out = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FileFormatError(f"{path}:{line_no}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ----------------------------------------------------------------- grid state


def save_grid_state(path, grid) -> None:
    np.savez_compressed(
        path,
        origin_cell=grid.origin_cell,
        log_odds=grid.log_odds,
        color_sum=grid.color_sum,
        color_count=grid.color_count,
        label_probs=grid.label_probs,
        has_label=grid.has_label,
        last_update=grid.last_update,
    )


def load_grid_state(path, grid) -> None:
    """Restore a snapshot into a grid built with the same config."""
    data = np.load(path)
    if tuple(data["log_odds"].shape) != grid.config.dims:
        raise FileFormatError(f"{path}: snapshot dims {data['log_odds'].shape} "
                              f"do not match the configured grid {grid.config.dims}")
    if data["label_probs"].shape[-1] != grid.label_count:
        raise FileFormatError(f"{path}: snapshot label count mismatch")
    grid.origin_cell = data["origin_cell"].astype(np.int64)
    grid.log_odds[...] = data["log_odds"]
    grid.color_sum[...] = data["color_sum"]
    grid.color_count[...] = data["color_count"]
    grid.label_probs[...] = data["label_probs"]
    grid.has_label[...] = data["has_label"]
    grid.last_update[...] = data["last_update"]
