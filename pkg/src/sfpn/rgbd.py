"""Streaming RGB-D front end.

Depth maps are projected to world-space point clouds through pinhole
intrinsics and a camera-to-world pose, accumulated frame by frame into a
growing scene cloud, and optionally perturbed by the seeded pose-noise
protocol used for robustness sweeps.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyFrame, RangeError

# Reference scale for translation noise: offsets are uniform in
# +-(ratio * 1 m); rotation angles are uniform in +-(ratio * pi/2).
NOISE_TRANSLATION_SCALE = 1.0
NOISE_ROTATION_SCALE = np.pi / 2


@dataclass
class FrameRecord:
    """One RGB-D observation: depth in meters (0 = invalid), pinhole
    intrinsics in pixels, and a row-major camera-to-world pose."""

    depth: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray
    frame_id: int

    def __post_init__(self):
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float32)
        self.pose = np.ascontiguousarray(self.pose, dtype=np.float32)
        if self.depth.ndim != 2:
            raise ValueError(f"depth must be (H, W), got {self.depth.shape}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {self.pose.shape}")
        if not np.array_equal(self.pose[3], np.array([0, 0, 0, 1], dtype=np.float32)):
            raise ValueError("pose bottom row must be exactly (0, 0, 0, 1)")
        r = self.pose[:3, :3].astype(np.float64)
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-4:
            raise ValueError("pose rotation block is not orthonormal within 1e-4")


def project_depth(frame: FrameRecord) -> np.ndarray:
    """Project valid pixels to world space; rows follow row-major pixel order."""
    depth = frame.depth
    valid = depth > 0
    if not valid.any():
        raise EmptyFrame(f"frame {frame.frame_id} has no valid depth")
    h, w = depth.shape
    vs, us = np.nonzero(valid)
    d = depth[vs, us].astype(np.float64)
    x = d * (us - frame.cx) / frame.fx
    y = d * (vs - frame.cy) / frame.fy
    cam = np.stack([x, y, d], axis=1)
    pose = frame.pose.astype(np.float64)
    return cam @ pose[:3, :3].T + pose[:3, 3]


def backproject(points_world: np.ndarray, frame: FrameRecord) -> np.ndarray:
    """Inverse of :func:`project_depth`: world points to (u, v, depth)."""
    pose = frame.pose.astype(np.float64)
    cam = (points_world - pose[:3, 3]) @ pose[:3, :3]
    d = cam[:, 2]
    u = cam[:, 0] * frame.fx / d + frame.cx
    v = cam[:, 1] * frame.fy / d + frame.cy
    return np.stack([u, v, d], axis=1)


@dataclass
class SceneState:
    """Accumulated scene cloud with per-point source frame ids."""

    _chunks: list = field(default_factory=list)
    _frame_ids: list = field(default_factory=list)
    frame_count: int = 0

    def __len__(self) -> int:
        return sum(c.shape[0] for c in self._chunks)

    @property
    def points(self) -> np.ndarray:
        if not self._chunks:
            return np.zeros((0, 3), dtype=np.float64)
        return np.concatenate(self._chunks, axis=0)

    @property
    def point_frame_ids(self) -> np.ndarray:
        if not self._frame_ids:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self._frame_ids)


def accumulate(state: SceneState, points: np.ndarray, frame_id: int | None = None) -> SceneState:
    """Append one frame's cloud; no spatial deduplication happens here."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    state.frame_count += 1
    fid = state.frame_count if frame_id is None else frame_id
    state._chunks.append(pts)
    state._frame_ids.append(np.full(pts.shape[0], fid, dtype=np.int64))
    return state


def _rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    a = axis / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def perturb_pose(pose: np.ndarray, noise_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Apply the seeded uniform pose perturbation.

    Translation: each axis offset by Uniform(-r, +r) meters (r = ratio * 1 m).
    Rotation: composed on the left with a rotation about a random axis by
    Uniform(-r * pi/2, +r * pi/2).  A ratio of 0 returns the pose bit-identical.

    Draw order is fixed (3 translation offsets, 3 axis components, 1 angle)
    so a shared generator yields reproducible per-frame sequences.
    """
    if not 0.0 <= noise_ratio <= 1.0:
        raise RangeError(f"noise_ratio must be in [0, 1], got {noise_ratio}")
    pose = np.asarray(pose)
    if noise_ratio == 0.0:
        return pose.copy()
    t_off = rng.uniform(-noise_ratio * NOISE_TRANSLATION_SCALE,
                        noise_ratio * NOISE_TRANSLATION_SCALE, size=3)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = rng.uniform(-noise_ratio * NOISE_ROTATION_SCALE,
                        noise_ratio * NOISE_ROTATION_SCALE)
    delta = _rotation_about(axis, angle)
    out = np.eye(4, dtype=np.float64)
    p = pose.astype(np.float64)
    out[:3, :3] = delta @ p[:3, :3]
    out[:3, 3] = p[:3, 3] + t_off
    return out.astype(pose.dtype)


_DEPTH_RE = re.compile(r"^(\d{6})\.f32$")


def frame_paths(seq_dir: str):
    """Sorted (frame_id, depth_path, mask_path_or_None) triples."""
    depth_dir = os.path.join(seq_dir, "depth")
    if not os.path.isdir(depth_dir):
        raise FileNotFoundError(f"missing depth directory in {seq_dir}")
    out = []
    for name in sorted(os.listdir(depth_dir)):
        m = _DEPTH_RE.match(name)
        if not m:
            continue
        fid = int(m.group(1))
        mask_path = os.path.join(seq_dir, "masks", f"{fid:06d}.u16")
        out.append((fid, os.path.join(depth_dir, name),
                    mask_path if os.path.exists(mask_path) else None))
    return out


class SequenceReader:
    """Reads the on-disk sequence layout.

    ``intrinsics.json`` holds fx/fy/cx/cy/width/height, ``poses.txt`` one
    row-major 4x4 pose (16 floats) per line, ``depth/NNNNNN.f32`` raw H x W
    little-endian f32 meters, and optional ``masks/NNNNNN.u16`` raw H x W
    little-endian u16 mask indices (0 = background).
    """

    def __init__(self, seq_dir: str):
        self.seq_dir = seq_dir
        with open(os.path.join(seq_dir, "intrinsics.json")) as fh:
            intr = json.load(fh)
        self.fx, self.fy = float(intr["fx"]), float(intr["fy"])
        self.cx, self.cy = float(intr["cx"]), float(intr["cy"])
        self.width, self.height = int(intr["width"]), int(intr["height"])
        poses = np.loadtxt(os.path.join(seq_dir, "poses.txt"), dtype=np.float64)
        poses = np.atleast_2d(poses)
        if poses.shape[1] != 16:
            raise ValueError("poses.txt lines must hold 16 floats each")
        self.poses = poses.reshape(-1, 4, 4).astype(np.float32)
        self.entries = frame_paths(seq_dir)
        if len(self.entries) > len(self.poses):
            raise ValueError(
                f"{len(self.entries)} depth frames but only {len(self.poses)} poses")

    def __len__(self) -> int:
        return len(self.entries)

    def frame(self, i: int):
        """Returns ``(FrameRecord, mask_array_or_None)`` for entry ``i``."""
        fid, depth_path, mask_path = self.entries[i]
        depth = np.fromfile(depth_path, dtype="<f4")
        if depth.size != self.height * self.width:
            raise ValueError(
                f"frame {fid}: depth size {depth.size} != {self.height}x{self.width}")
        depth = depth.reshape(self.height, self.width)
        rec = FrameRecord(depth, self.fx, self.fy, self.cx, self.cy,
                          self.poses[i], fid)
        mask = None
        if mask_path is not None:
            mask = np.fromfile(mask_path, dtype="<u2").reshape(self.height, self.width)
        return rec, mask


def write_sequence(seq_dir: str, intrinsics: dict, poses, depths, masks=None) -> None:
    """Write the sequence layout consumed by :class:`SequenceReader`."""
    os.makedirs(os.path.join(seq_dir, "depth"), exist_ok=True)
    if masks is not None:
        os.makedirs(os.path.join(seq_dir, "masks"), exist_ok=True)
    with open(os.path.join(seq_dir, "intrinsics.json"), "w") as fh:
        json.dump(intrinsics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(seq_dir, "poses.txt"), "w") as fh:
        for p in poses:
            fh.write(" ".join(repr(float(v)) for v in np.asarray(p).reshape(16)) + "\n")
    for i, depth in enumerate(depths):
        np.ascontiguousarray(depth, dtype="<f4").tofile(
            os.path.join(seq_dir, "depth", f"{i:06d}.f32"))
        if masks is not None:
            np.ascontiguousarray(masks[i], dtype="<u2").tofile(
                os.path.join(seq_dir, "masks", f"{i:06d}.u16"))
