"""Seeded synthetic inputs: a surface-sampled room for benchmarking and a
tiny analytic RGB-D sequence for end-to-end runs.  Everything is a pure
function of its seed so benchmark inputs are reproducible across machines.
"""

from __future__ import annotations

import numpy as np

from . import rgbd
from .sparse_tensor import DEFAULT_VOXEL_SIZE, voxelize


def room_points(seed: int = 0, n_points: int = 20000,
                extent=(6.0, 4.0, 2.5), n_boxes: int = 8) -> np.ndarray:
    """Surface-sample a floor plane plus random axis-aligned boxes.

    Points are distributed across surfaces proportionally to area, so the
    cloud looks like a sparse indoor scan rather than a volume sample.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    ex, ey, ez = extent

    # Each surface: (origin, edge_u, edge_v) spanning a rectangle.
    surfaces = [(np.array([0.0, 0.0, 0.0]), np.array([ex, 0, 0]), np.array([0, ey, 0]))]
    for _ in range(n_boxes):
        sx, sy = rng.uniform(0.4, 1.4, size=2)
        sz = rng.uniform(0.3, min(1.8, ez))
        x0 = rng.uniform(0, ex - sx)
        y0 = rng.uniform(0, ey - sy)
        o = np.array([x0, y0, 0.0])
        dx, dy, dz = np.array([sx, 0, 0]), np.array([0, sy, 0]), np.array([0, 0, sz])
        surfaces.append((o + dz, dx, dy))            # top
        surfaces.append((o, dx, dz))                 # y = y0 side
        surfaces.append((o + dy, dx, dz))            # y = y0 + sy side
        surfaces.append((o, dy, dz))                 # x = x0 side
        surfaces.append((o + dx, dy, dz))            # x = x0 + sx side

    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in surfaces])
    counts = np.floor(n_points * areas / areas.sum()).astype(int)
    counts[0] += n_points - counts.sum()

    chunks = []
    for (origin, u, v), cnt in zip(surfaces, counts):
        if cnt <= 0:
            continue
        a = rng.uniform(0, 1, size=(cnt, 1))
        b = rng.uniform(0, 1, size=(cnt, 1))
        chunks.append(origin + a * u + b * v)
    return np.concatenate(chunks, axis=0)


def room_tensor(seed: int = 0, n_points: int = 20000,
                voxel_size: float = DEFAULT_VOXEL_SIZE):
    """Voxelized benchmark input; returns (tensor, points)."""
    pts = room_points(seed, n_points)
    tensor, _ = voxelize(pts, voxel_size)
    return tensor, pts


def synthetic_sequence(seq_dir: str, frames: int = 2, seed: int = 0,
                       height: int = 48, width: int = 64,
                       n_objects: int = 2, mode: str = "pan") -> None:
    """Write a small analytic RGB-D sequence with 2D instance masks.

    The scene is a background wall at 3 m with ``n_objects`` rectangular
    slabs at nearer depths; each slab is one mask index.  ``mode``
    controls camera motion: ``static`` repeats the identity pose (every
    frame observes the exact same points, the degenerate merging case) and
    ``pan`` translates the camera sideways by 5 cm per frame.
    """
    if mode not in ("static", "pan"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    fx = fy = 60.0
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0

    rects = []
    for k in range(n_objects):
        rw = int(rng.integers(width // 6, width // 3))
        rh = int(rng.integers(height // 6, height // 3))
        u0 = int(rng.integers(1, width - rw - 1))
        v0 = int(rng.integers(1, height - rh - 1))
        depth_k = float(rng.uniform(1.6, 2.4))
        rects.append((u0, v0, rw, rh, depth_k))

    depths, masks, poses = [], [], []
    for i in range(frames):
        depth = np.full((height, width), 3.0, dtype=np.float32)
        mask = np.zeros((height, width), dtype=np.uint16)
        for k, (u0, v0, rw, rh, dk) in enumerate(rects, start=1):
            depth[v0:v0 + rh, u0:u0 + rw] = dk
            mask[v0:v0 + rh, u0:u0 + rw] = k
        pose = np.eye(4, dtype=np.float32)
        if mode == "pan":
            pose[0, 3] = 0.05 * i
        depths.append(depth)
        masks.append(mask)
        poses.append(pose)

    rgbd.write_sequence(
        seq_dir,
        {"fx": fx, "fy": fy, "cx": cx, "cy": cy, "width": width, "height": height},
        poses, depths, masks,
    )
