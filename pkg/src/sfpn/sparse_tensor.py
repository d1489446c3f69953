"""Voxelization and the coordinate-indexed sparse tensor.

A sparse tensor is a duplicate-free list of occupied voxel coordinates on a
stride lattice plus one feature row per coordinate.  All convolutions in the
library consume and produce this representation.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DuplicateCoord, EmptyCloud, InvalidPoint, StrideViolation

DEFAULT_VOXEL_SIZE = 0.02

# When true (or SFPN_DEBUG_VALIDATE=1), every constructed tensor runs the
# full invariant check (duplicate-free coords, bijective index, finite
# features).  Too slow for production paths, invaluable in tests.
DEBUG_VALIDATE = os.environ.get("SFPN_DEBUG_VALIDATE") == "1"

# Coordinates are packed into a single int64 key (21 bits per axis), so each
# component must stay within this bound.
COORD_BOUND = 1 << 20

_SPC_MAGIC = b"SPC1"
_SPC_HAS_FEATURES = 0x01


def _pack_keys(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    return (
        ((c[:, 0] + COORD_BOUND) << 42)
        | ((c[:, 1] + COORD_BOUND) << 21)
        | (c[:, 2] + COORD_BOUND)
    )


class CoordIndex:
    """Exact coordinate -> row lookup over a duplicate-free coordinate list.

    Backed by a sorted packed-key array; lookups are vectorized binary
    searches.  Absent coordinates map to row -1, never to a wrong row.
    """

    def __init__(self, coords: np.ndarray):
        coords = np.ascontiguousarray(coords, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must be (N, 3), got {coords.shape}")
        if coords.size and np.abs(coords).max() >= COORD_BOUND:
            raise ValueError(f"voxel coordinates must lie in (-{COORD_BOUND}, {COORD_BOUND})")
        keys = _pack_keys(coords)
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        if sorted_keys.size > 1 and np.any(sorted_keys[1:] == sorted_keys[:-1]):
            raise DuplicateCoord("coordinate list contains duplicates")
        self._coords = coords
        self._sorted_keys = sorted_keys
        self._order = order

    def __len__(self) -> int:
        return self._coords.shape[0]

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Rows for each query coordinate; -1 where absent."""
        q = np.asarray(coords, dtype=np.int64)
        squeeze = q.ndim == 1
        q = np.atleast_2d(q)
        in_range = np.all(np.abs(q) < COORD_BOUND, axis=1)
        keys = _pack_keys(np.where(in_range[:, None], q, 0))
        rows = self.lookup_keys(keys)
        rows[~in_range] = -1
        return rows[0] if squeeze else rows

    def lookup_keys(self, keys: np.ndarray) -> np.ndarray:
        """Rows for pre-packed keys (the fast path used by rulebooks).

        Callers must guarantee the keys came from in-bound coordinates;
        :func:`_pack_keys` is linear, so a neighbor key is the base key
        plus a per-offset delta as long as no axis leaves the bound.
        """
        if len(self) == 0:
            return np.full(keys.shape[0], -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, len(self._sorted_keys) - 1)
        hit = self._sorted_keys[pos] == keys
        return np.where(hit, self._order[pos], -1)

    def max_abs_coord(self) -> int:
        return int(np.abs(self._coords).max()) if len(self) else 0

    def get(self, coord) -> int | None:
        row = int(self.lookup(np.asarray(coord, dtype=np.int64)))
        return None if row < 0 else row

    def __contains__(self, coord) -> bool:
        return self.get(coord) is not None


def build_index(coords: np.ndarray) -> CoordIndex:
    """Build the exact lookup for a duplicate-free coordinate list."""
    return CoordIndex(coords)


class SparseTensor:
    """Occupied voxel coordinates at one stride plus an N x C feature matrix.

    Immutable after construction: the coordinate and feature arrays are
    marked read-only so a tensor can be shared freely across threads.  The
    row index is built lazily (many intermediate tensors never need it).
    """

    __slots__ = ("coords", "features", "stride", "voxel_size", "_index")

    def __init__(self, coords, features, stride=1, voxel_size=DEFAULT_VOXEL_SIZE, index=None):
        coords = np.ascontiguousarray(coords, dtype=np.int64)
        features = np.ascontiguousarray(features, dtype=np.float32)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must be (N, 3), got {coords.shape}")
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ValueError(
                f"features must be (N, C) with N={coords.shape[0]}, got {features.shape}"
            )
        if stride < 1 or (stride & (stride - 1)) != 0:
            raise StrideViolation(f"stride must be a positive power of two, got {stride}")
        if voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        if coords.size and np.any(coords % stride != 0):
            raise StrideViolation(f"coordinates are not on the stride-{stride} lattice")
        coords.setflags(write=False)
        features.setflags(write=False)
        self.coords = coords
        self.features = features
        self.stride = int(stride)
        self.voxel_size = float(voxel_size)
        self._index = index
        if DEBUG_VALIDATE:
            self.validate()

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    @property
    def index(self) -> CoordIndex:
        if self._index is None:
            self._index = CoordIndex(self.coords)
        return self._index

    def voxel_centers(self) -> np.ndarray:
        """World-space centers of the cells, in meters (float64)."""
        return (self.coords + 0.5 * self.stride) * self.voxel_size

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        """Same lattice, new feature matrix (index shared)."""
        return SparseTensor(self.coords, features, self.stride, self.voxel_size, self._index)

    def validate(self) -> None:
        """Full invariant check: duplicate-free coords, bijective index,
        lattice alignment, matching row counts.  Intended for debug mode
        and tests; construction already enforces the cheap subset."""
        idx = self.index
        rows = idx.lookup(self.coords)
        if not np.array_equal(rows, np.arange(len(self))):
            raise DuplicateCoord("index is not a bijection onto 0..N-1")
        if self.features.shape[0] != self.coords.shape[0]:
            raise ValueError("feature row count does not match coordinate count")
        if len(self) and np.any(self.coords % self.stride != 0):
            raise StrideViolation("coordinates off the stride lattice")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")


def voxelize(points, voxel_size=DEFAULT_VOXEL_SIZE, features=None):
    """Quantize a point cloud onto a voxel grid.

    Each point falls into the half-open cell ``floor(p / voxel_size)``.
    Duplicate cells are merged; cell features are the mean of the input
    features of the points in the cell (constant 1 when none are given).

    Returns ``(tensor, point_to_voxel)`` where ``point_to_voxel[i]`` is the
    tensor row holding point ``i``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    if pts.shape[0] == 0:
        raise EmptyCloud("voxelize requires at least one point")
    if voxel_size <= 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    finite = np.isfinite(pts).all(axis=1)
    if not finite.all():
        raise InvalidPoint(int(np.flatnonzero(~finite)[0]))

    cells = np.floor(pts / voxel_size).astype(np.int64)
    unique, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1).astype(np.int64)
    n_voxels = unique.shape[0]
    counts = np.bincount(inverse, minlength=n_voxels).astype(np.float64)

    if features is None:
        feats = np.ones((n_voxels, 1), dtype=np.float32)
    else:
        f = np.asarray(features, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        if f.shape[0] != pts.shape[0]:
            raise ValueError("features must have one row per point")
        sums = np.empty((n_voxels, f.shape[1]), dtype=np.float64)
        for c in range(f.shape[1]):
            sums[:, c] = np.bincount(inverse, weights=f[:, c], minlength=n_voxels)
        feats = (sums / counts[:, None]).astype(np.float32)

    tensor = SparseTensor(unique, feats, stride=1, voxel_size=voxel_size)
    return tensor, inverse


def downsample_coords(coords: np.ndarray, stride_in: int, factor: int = 2) -> np.ndarray:
    """Coordinate set at the next-coarser lattice (stride_in * factor).

    Output coordinates are the unique cell corners
    ``floor(c / (stride_in * factor)) * (stride_in * factor)``.
    """
    if factor != 2:
        raise ValueError(f"only factor 2 is supported, got {factor}")
    c = np.asarray(coords, dtype=np.int64)
    if c.size and np.any(c % stride_in != 0):
        raise StrideViolation(f"coordinates are not on the stride-{stride_in} lattice")
    target = stride_in * factor
    return np.unique((c // target) * target, axis=0)


def save_point_cloud(path, points, features=None) -> None:
    """Write the binary point-cloud container.

    Layout: magic ``SPC1``, u8 flags (bit 0 = feature block present),
    u32 LE point count, [u32 LE feature width], N x 3 f32 LE XYZ,
    [N x W f32 LE features].
    """
    pts = np.ascontiguousarray(points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    flags = 0
    blob = bytearray()
    blob += _SPC_MAGIC
    if features is not None:
        flags |= _SPC_HAS_FEATURES
    blob += struct.pack("<B", flags)
    blob += struct.pack("<I", pts.shape[0])
    if features is not None:
        f = np.ascontiguousarray(features, dtype="<f4")
        if f.ndim == 1:
            f = f[:, None]
        if f.shape[0] != pts.shape[0]:
            raise ValueError("features must have one row per point")
        blob += struct.pack("<I", f.shape[1])
    blob += pts.tobytes()
    if features is not None:
        blob += f.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_point_cloud(path):
    """Read the binary point-cloud container; returns (points, features|None)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _SPC_MAGIC:
        raise ValueError(f"bad magic {data[:4]!r}, expected {_SPC_MAGIC!r}")
    (flags,) = struct.unpack_from("<B", data, 4)
    (count,) = struct.unpack_from("<I", data, 5)
    off = 9
    width = 0
    if flags & _SPC_HAS_FEATURES:
        (width,) = struct.unpack_from("<I", data, off)
        off += 4
    pts = np.frombuffer(data, dtype="<f4", count=count * 3, offset=off).reshape(count, 3)
    off += count * 12
    feats = None
    if flags & _SPC_HAS_FEATURES:
        feats = np.frombuffer(data, dtype="<f4", count=count * width, offset=off)
        feats = feats.reshape(count, width)
    return pts.copy(), None if feats is None else feats.copy()
