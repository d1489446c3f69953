"""Rulebook-based sparse 3D convolution primitives.

Three modes share one gather-multiply-scatter core:

* ``submanifold`` -- odd kernel centered on each occupied voxel; the output
  coordinate set equals the input set, so the occupied region never dilates.
* ``strided`` -- kernel-2 window anchored at the coarse cell corner; outputs
  live on the twice-coarser lattice (generative downsampling).
* ``transposed`` -- exact adjoint of ``strided``; upsamples onto a caller
  supplied finer lattice (normally a recorded encoder lattice).

A pair (in_row, out_row) exists at offset ``o`` iff
``in_coord = out_coord + o * fine_stride`` and both cells are occupied.  For
a fixed offset this pairing is injective in both rows, so scatter within one
offset is a plain fancy-indexed add; offsets are accumulated in a fixed
lexicographic order, which makes repeated forwards bit-identical.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidKernel,
    MissingTargetCoords,
    ShapeError,
    StrideViolation,
    TestScaleExceeded,
)
from .sparse_tensor import CoordIndex, SparseTensor, downsample_coords

SUBMANIFOLD = "submanifold"
STRIDED = "strided"
TRANSPOSED = "transposed"
MODES = (SUBMANIFOLD, STRIDED, TRANSPOSED)

DENSE_ORACLE_MAX_DIM = 32


def kernel_offsets(mode: str, kernel_size: int) -> np.ndarray:
    """Unscaled integer offsets in fixed lexicographic order.

    Submanifold kernels are centered ({-r..r}^3, odd size); strided and
    transposed kernels use the corner-anchored {0..k-1}^3 window (size 2).
    """
    if mode == SUBMANIFOLD:
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise InvalidKernel(f"submanifold kernel size must be odd, got {kernel_size}")
        r = kernel_size // 2
        rng = range(-r, r + 1)
    elif mode in (STRIDED, TRANSPOSED):
        if kernel_size != 2:
            raise InvalidKernel(f"{mode} convolutions use kernel size 2, got {kernel_size}")
        rng = range(0, kernel_size)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return np.array(list(itertools.product(rng, rng, rng)), dtype=np.int64)


@dataclass
class Rulebook:
    """Per-offset (in_row, out_row) pair lists driving gather-scatter."""

    mode: str
    kernel_size: int
    in_stride: int
    out_stride: int
    offsets: np.ndarray                      # (K^3, 3) unscaled
    pairs: list                              # aligned with offsets: (in_rows, out_rows)
    out_coords: np.ndarray                   # (M, 3)
    in_count: int
    out_count: int
    out_index: CoordIndex | None = field(default=None, repr=False)

    def num_pairs(self) -> int:
        return sum(len(i) for i, _ in self.pairs)


def _lookup_pairs(base_coords, offsets_scaled, index, flip_roles=False):
    """Vectorized pair enumeration.

    For every row of ``base_coords`` and every scaled offset, the candidate
    ``base + offset`` is looked up in ``index``.  Returns per-offset
    (looked_up_row, base_row) pairs, or the flipped roles when the base side
    is the input (transposed mode).
    """
    from .sparse_tensor import COORD_BOUND, _pack_keys

    n = base_coords.shape[0]
    k = offsets_scaled.shape[0]
    max_off = int(np.abs(offsets_scaled).max()) if k else 0
    base_max = int(np.abs(base_coords).max()) if n else 0
    if base_max + max_off < COORD_BOUND and index.max_abs_coord() + max_off < COORD_BOUND:
        # Key packing is linear, so neighbor keys are base keys plus a
        # per-offset delta; this avoids materializing (K, N, 3) candidates.
        base_keys = _pack_keys(base_coords)
        deltas = (offsets_scaled[:, 0] << 42) + (offsets_scaled[:, 1] << 21) \
            + offsets_scaled[:, 2]
        keys = base_keys[None, :] + deltas[:, None]
        rows = index.lookup_keys(keys.reshape(-1)).reshape(k, n)
    else:
        candidates = base_coords[None, :, :] + offsets_scaled[:, None, :]
        rows = index.lookup(candidates.reshape(-1, 3)).reshape(k, n)
    base_rows = np.arange(n, dtype=np.int64)
    pairs = []
    for ko in range(k):
        hit = rows[ko] >= 0
        found = rows[ko][hit]
        base = base_rows[hit]
        if flip_roles:
            pairs.append((base, found))
        else:
            pairs.append((found, base))
    return pairs


def build_rulebook(tensor: SparseTensor, mode: str, kernel_size: int,
                   out_coords: np.ndarray | None = None,
                   out_index: CoordIndex | None = None):
    """Enumerate the kernel map for one convolution.

    Returns ``(rulebook, out_coords)``.  Transposed mode requires the target
    lattice (``out_coords``) whose stride must be ``in_stride / 2``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    offsets = kernel_offsets(mode, kernel_size)
    s = tensor.stride

    if mode == SUBMANIFOLD:
        out = tensor.coords
        pairs = _lookup_pairs(out, offsets * s, tensor.index)
        rb = Rulebook(mode, kernel_size, s, s, offsets, pairs, out,
                      len(tensor), len(tensor), tensor._index)
        return rb, out

    if mode == STRIDED:
        if out_coords is None:
            out_coords = downsample_coords(tensor.coords, s)
        pairs = _lookup_pairs(out_coords, offsets * s, tensor.index)
        rb = Rulebook(mode, kernel_size, s, 2 * s, offsets, pairs, out_coords,
                      len(tensor), out_coords.shape[0])
        return rb, out_coords

    # transposed
    if out_coords is None:
        raise MissingTargetCoords("transposed convolution needs target coordinates")
    if s % 2 != 0:
        raise StrideViolation(f"cannot upsample from stride {s}")
    fine = s // 2
    out_coords = np.ascontiguousarray(out_coords, dtype=np.int64)
    if out_coords.size and np.any(out_coords % fine != 0):
        raise StrideViolation(f"target coordinates are not on the stride-{fine} lattice")
    if out_index is None:
        out_index = CoordIndex(out_coords)
    # Same geometric pairs as the strided rulebook fine -> coarse, with the
    # coarse side now acting as input: fine = coarse + o * fine_stride.
    pairs = _lookup_pairs(tensor.coords, offsets * fine, out_index, flip_roles=True)
    rb = Rulebook(mode, kernel_size, s, fine, offsets, pairs, out_coords,
                  len(tensor), out_coords.shape[0], out_index)
    return rb, out_coords


@dataclass
class ConvParams:
    """Convolution weights: (K^3, C_in, C_out) in kernel-offset order."""

    weights: np.ndarray
    bias: np.ndarray | None = None
    mode: str = SUBMANIFOLD

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        if self.weights.ndim != 3:
            raise ShapeError(f"weights must be (K^3, C_in, C_out), got {self.weights.shape}")
        k = round(self.weights.shape[0] ** (1 / 3))
        if k ** 3 != self.weights.shape[0]:
            raise ShapeError(f"leading weight dim {self.weights.shape[0]} is not a cube")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)
            if self.bias.shape != (self.weights.shape[2],):
                raise ShapeError(
                    f"bias shape {self.bias.shape} does not match C_out {self.weights.shape[2]}"
                )
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def kernel_size(self) -> int:
        return round(self.weights.shape[0] ** (1 / 3))

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]


@dataclass
class NormParams:
    """Inference-mode per-channel normalization followed by affine."""

    scale: np.ndarray
    shift: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        arrs = []
        for name in ("scale", "shift", "mean", "var"):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if a.ndim != 1:
                raise ShapeError(f"{name} must be 1-D")
            arrs.append(a)
            setattr(self, name, a)
        if len({a.shape[0] for a in arrs}) != 1:
            raise ShapeError("norm parameter lengths differ")
        if np.any(self.var < 0):
            raise ValueError("variance entries must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @staticmethod
    def identity(channels: int, epsilon: float = 1e-5) -> "NormParams":
        return NormParams(
            scale=np.ones(channels, np.float32),
            shift=np.zeros(channels, np.float32),
            mean=np.zeros(channels, np.float32),
            var=np.ones(channels, np.float32),
            epsilon=epsilon,
        )

    @property
    def num_channels(self) -> int:
        return self.scale.shape[0]


def conv_forward(tensor: SparseTensor, params: ConvParams, rulebook: Rulebook,
                 out_index: CoordIndex | None = None) -> SparseTensor:
    """Gather-multiply-scatter forward pass.

    ``out[j] = bias + sum_o sum_{(i,j) in pairs(o)} in[i] @ W[o]``, offsets
    accumulated in lexicographic order (fixed per output row).
    """
    if params.mode != rulebook.mode:
        raise ShapeError(f"params mode {params.mode!r} != rulebook mode {rulebook.mode!r}")
    if params.kernel_size != rulebook.kernel_size:
        raise ShapeError("kernel size mismatch between params and rulebook")
    if tensor.num_channels != params.in_channels:
        raise ShapeError(
            f"input has {tensor.num_channels} channels, weights expect {params.in_channels}"
        )
    if len(tensor) != rulebook.in_count:
        raise ShapeError("rulebook was built for a different input tensor")

    feats = tensor.features
    out = np.zeros((rulebook.out_count, params.out_channels), dtype=np.float32)
    if params.bias is not None:
        out += params.bias
    for ko in range(rulebook.offsets.shape[0]):
        in_rows, out_rows = rulebook.pairs[ko]
        if len(in_rows) == 0:
            continue
        out[out_rows] += feats[in_rows] @ params.weights[ko]

    if out_index is None:
        out_index = rulebook.out_index
    return SparseTensor(rulebook.out_coords, out, rulebook.out_stride,
                        tensor.voxel_size, out_index)


def _normalized(tensor: SparseTensor, p: NormParams) -> np.ndarray:
    if tensor.num_channels != p.num_channels:
        raise ShapeError(
            f"tensor has {tensor.num_channels} channels, norm expects {p.num_channels}"
        )
    inv = (p.scale / np.sqrt(p.var + np.float32(p.epsilon))).astype(np.float32)
    return tensor.features * inv + (p.shift - p.mean * inv)


def norm_forward(tensor: SparseTensor, p: NormParams) -> SparseTensor:
    """Normalize + affine, no activation; coordinates unchanged."""
    return tensor.with_features(_normalized(tensor, p))


def norm_relu_forward(tensor: SparseTensor, p: NormParams) -> SparseTensor:
    """Normalize + affine + ReLU; coordinates unchanged."""
    return tensor.with_features(np.maximum(_normalized(tensor, p), 0.0))


def identity_rulebook(tensor: SparseTensor) -> Rulebook:
    """Kernel-1 submanifold rulebook: the center-offset identity pairing."""
    rows = np.arange(len(tensor), dtype=np.int64)
    return Rulebook(SUBMANIFOLD, 1, tensor.stride, tensor.stride,
                    np.zeros((1, 3), np.int64), [(rows, rows)],
                    tensor.coords, len(tensor), len(tensor), tensor._index)


def residual_block_forward(tensor: SparseTensor,
                           params1: ConvParams, params2: ConvParams,
                           norm1: NormParams, norm2: NormParams,
                           projection: ConvParams | None = None,
                           rulebook: Rulebook | None = None) -> SparseTensor:
    """Two submanifold convolutions with a shortcut.

    ``out = ReLU(Norm2(Conv2(ReLU(Norm1(Conv1(t))))) + shortcut(t))`` where
    the shortcut is identity, or the given kernel-1 projection when the
    channel widths differ.  The coordinate set is unchanged.
    """
    if params1.mode != SUBMANIFOLD or params2.mode != SUBMANIFOLD:
        raise ShapeError("residual block convolutions must be submanifold")
    if params1.kernel_size != params2.kernel_size:
        raise ShapeError("residual block convolutions must share a kernel size")
    c_in, c_out = params1.in_channels, params2.out_channels
    if c_in != c_out and projection is None:
        raise ShapeError(f"channel change {c_in} -> {c_out} requires a projection")
    if tensor.num_channels != c_in:
        raise ShapeError(f"input has {tensor.num_channels} channels, block expects {c_in}")

    if rulebook is None:
        rulebook, _ = build_rulebook(tensor, SUBMANIFOLD, params1.kernel_size)
    h = norm_relu_forward(conv_forward(tensor, params1, rulebook), norm1)
    h = norm_forward(conv_forward(h, params2, rulebook), norm2)

    if projection is not None:
        shortcut = conv_forward(tensor, projection, identity_rulebook(tensor))
        short_feats = shortcut.features
    else:
        short_feats = tensor.features
    return tensor.with_features(np.maximum(h.features + short_feats, 0.0))


def dense_oracle_conv(grid: np.ndarray, params: ConvParams) -> np.ndarray:
    """Textbook dense 3D convolution with the sparse modes' semantics.

    Test oracle only.  ``grid`` is (D1, D2, D3, C_in); the output follows the
    mode: same shape (submanifold), ceil(D/2) per axis (strided), 2*D per
    axis (transposed).  Grids larger than 32 per axis are rejected.
    """
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 4:
        raise ShapeError(f"grid must be (D1, D2, D3, C), got {grid.shape}")
    if max(grid.shape[:3]) > DENSE_ORACLE_MAX_DIM:
        raise TestScaleExceeded(f"grid {grid.shape[:3]} exceeds {DENSE_ORACLE_MAX_DIM}^3")
    if grid.shape[3] != params.in_channels:
        raise ShapeError("grid channel count does not match weights")
    offsets = kernel_offsets(params.mode, params.kernel_size)
    dims = grid.shape[:3]
    c_out = params.out_channels

    if params.mode == SUBMANIFOLD:
        out = np.zeros(dims + (c_out,), dtype=np.float32)
        for ko, off in enumerate(offsets):
            src, dst = [], []
            for ax in range(3):
                o = int(off[ax])
                lo, hi = max(0, o), min(dims[ax], dims[ax] + o)
                src.append(slice(lo, hi))
                dst.append(slice(lo - o, hi - o))
            out[tuple(dst)] += grid[tuple(src)] @ params.weights[ko]
    elif params.mode == STRIDED:
        out_dims = tuple(-(-d // 2) for d in dims)
        out = np.zeros(out_dims + (c_out,), dtype=np.float32)
        for ko, off in enumerate(offsets):
            sl_in, sl_out = [], []
            for ax in range(3):
                o = int(off[ax])
                n = (dims[ax] - o + 1) // 2  # windows with position 2q+o in range
                sl_in.append(slice(o, o + 2 * n, 2))
                sl_out.append(slice(0, n))
            out[tuple(sl_out)] += grid[tuple(sl_in)] @ params.weights[ko]
    else:  # transposed
        out_dims = tuple(2 * d for d in dims)
        out = np.zeros(out_dims + (c_out,), dtype=np.float32)
        for ko, off in enumerate(offsets):
            sl = tuple(slice(int(o), out_dims[ax] + int(o) - 1, 2) for ax, o in enumerate(off))
            out[sl] += grid @ params.weights[ko]

    if params.bias is not None:
        out += params.bias
    return out
