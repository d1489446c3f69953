"""Query lifting, refinement, and similarity-based instance merging.

2D masks are lifted to per-mask pooled features (superpoints) over the
backbone output, refined by a minimal single-head attention decoder, and
merged into the accumulated instance store by greedy matching on the
cosine-similarity matrix product.
"""

from __future__ import annotations

import itertools
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyFrame,
    NoMasks,
    NormalizationError,
    RangeError,
    ShapeError,
    ZeroVector,
)
from .sparse_tensor import SparseTensor

DEFAULT_MERGE_THRESHOLD = 0.7
DEFAULT_MERGE_ALPHA = 0.5
_UNIT_NORM_TOL = 1e-4


@dataclass
class MaskSet2D:
    """H x W index map; pixel value k in 1..count selects mask k, 0 is none."""

    indices: np.ndarray
    count: int

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.uint16)
        if self.indices.ndim != 2:
            raise ValueError(f"mask map must be (H, W), got {self.indices.shape}")
        if self.indices.size and int(self.indices.max()) > self.count:
            raise ValueError("mask map references an index above the declared count")


@dataclass
class QuerySet:
    """One pooled feature row per retained mask plus its voxel support."""

    features: np.ndarray                 # (L, C) f32
    support: list                        # per query: unique voxel rows into F_p
    mask_ids: np.ndarray                 # original 1-based mask index per query
    skipped: list = field(default_factory=list)   # dropped mask ids (no valid pixels)

    def __len__(self) -> int:
        return self.features.shape[0]


def lift_masks(masks: MaskSet2D, frame, fp: SparseTensor,
               point_map: np.ndarray) -> QuerySet:
    """Pool backbone features over each mask's valid-depth pixels.

    ``point_map[i]`` is the F_p row of the i-th valid-depth pixel of the
    frame in row-major order (the same order its projected points were
    produced in).  The pooled feature is the per-pixel gather-and-mean;
    masks with no valid pixel are dropped and recorded in ``skipped``.
    """
    if masks.count < 1:
        raise NoMasks("mask set is empty")
    valid = frame.depth > 0
    if not valid.any():
        raise EmptyFrame(f"frame {frame.frame_id} has no valid depth")
    mask_vals = masks.indices[valid]
    point_map = np.asarray(point_map, dtype=np.int64)
    if mask_vals.shape[0] != point_map.shape[0]:
        raise ShapeError(
            f"{mask_vals.shape[0]} valid pixels but point map has {point_map.shape[0]} rows")

    feats, support, kept, skipped = [], [], [], []
    for k in range(1, masks.count + 1):
        pix = np.flatnonzero(mask_vals == k)
        if pix.size == 0:
            skipped.append(k)
            continue
        rows = point_map[pix]
        feats.append(fp.features[rows].mean(axis=0, dtype=np.float64).astype(np.float32))
        support.append(np.unique(rows))
        kept.append(k)
    if not kept:
        raise NoMasks("every mask was empty on valid-depth pixels")
    return QuerySet(np.stack(feats), support, np.asarray(kept, dtype=np.int64), skipped)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


class QueryRefiner:
    """Minimal query decoder: single-head attention over the point features
    followed by a residual feed-forward update, repeated ``rounds`` times,
    plus an affine class head.  Weights are seeded and fixed."""

    def __init__(self, dim: int, num_classes: int = 1, seed: int = 0):
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(dim)
        self.dim = dim
        self.num_classes = num_classes
        self.w1 = rng.uniform(-bound, bound, (dim, dim)).astype(np.float32)
        self.b1 = rng.uniform(-bound, bound, dim).astype(np.float32)
        self.w2 = rng.uniform(-bound, bound, (dim, dim)).astype(np.float32)
        self.b2 = rng.uniform(-bound, bound, dim).astype(np.float32)
        self.w_cls = rng.uniform(-bound, bound, (dim, num_classes)).astype(np.float32)
        self.b_cls = rng.uniform(-bound, bound, num_classes).astype(np.float32)

    def attend(self, queries: np.ndarray, fp: SparseTensor) -> np.ndarray:
        """Scaled dot-product attention context, one head."""
        logits = queries @ fp.features.T / np.float32(np.sqrt(self.dim))
        return _softmax_rows(logits) @ fp.features

    def refine_and_predict(self, queries: QuerySet, fp: SparseTensor, rounds: int = 1):
        """Returns ``(refined_queries, mask_logits, boxes, class_logits)``.

        With ``rounds == 0`` the mask logits are exactly the raw pooled
        features times F_p transposed.  Boxes are the axis-aligned bounds of
        the voxel centers a query claims (sigmoid > 0.5), falling back to
        its pooled support when it claims nothing.
        """
        if rounds < 0:
            raise RangeError(f"rounds must be >= 0, got {rounds}")
        if queries.features.shape[1] != self.dim:
            raise ShapeError(f"queries have width {queries.features.shape[1]}, head expects {self.dim}")
        q = queries.features.astype(np.float32)
        for _ in range(rounds):
            h = q + self.attend(q, fp)
            q = h + np.maximum(h @ self.w1 + self.b1, 0.0) @ self.w2 + self.b2
        mask_logits = q @ fp.features.T

        centers = fp.voxel_centers()
        boxes = np.empty((len(queries), 2, 3), dtype=np.float64)
        for i in range(len(queries)):
            sel = mask_logits[i] > 0
            pts = centers[sel] if sel.any() else centers[queries.support[i]]
            boxes[i, 0] = pts.min(axis=0)
            boxes[i, 1] = pts.max(axis=0)
        class_logits = q @ self.w_cls + self.b_cls
        refined = QuerySet(q, queries.support, queries.mask_ids, queries.skipped)
        return refined, mask_logits, boxes, class_logits


def unit_normalize(features: np.ndarray) -> np.ndarray:
    """Scale rows to unit norm; raises ZeroVector on a (near-)zero row."""
    f = np.asarray(features, dtype=np.float32)
    norms = np.linalg.norm(f, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ZeroVector("cannot normalize a zero feature vector")
    return f / norms


def _check_unit(features: np.ndarray, what: str) -> None:
    if features.shape[0] == 0:
        return
    norms = np.linalg.norm(features, axis=1)
    if np.abs(norms - 1.0).max() > _UNIT_NORM_TOL:
        raise NormalizationError(f"{what} features are not unit-norm within {_UNIT_NORM_TOL}")


@dataclass
class Instance:
    instance_id: int
    feature: np.ndarray            # (C,) unit-norm f32
    points: np.ndarray             # sorted unique global point indices
    last_seen: int
    class_id: int = 0


@dataclass
class InstanceStore:
    """Scene-level instances accumulated across frames."""

    instances: list = field(default_factory=list)
    _next_id: int = 0

    def __len__(self) -> int:
        return len(self.instances)

    def feature_matrix(self) -> np.ndarray:
        if not self.instances:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack([inst.feature for inst in self.instances])

    def total_points(self) -> int:
        return int(sum(inst.points.size for inst in self.instances))


@dataclass
class MergeOutcome:
    instance_ids: list               # store id per current query
    merged: int
    created: int


def merge(store: InstanceStore, features: np.ndarray, point_sets: list,
          threshold: float = DEFAULT_MERGE_THRESHOLD,
          alpha: float = DEFAULT_MERGE_ALPHA,
          frame_id: int = 0, class_ids=None) -> MergeOutcome:
    """Fold one frame's queries into the store.

    The similarity matrix is the plain product of the unit-norm feature
    matrices (cosine).  Candidate pairs are taken greedily in descending
    similarity (ties broken by row-major order), each query and each stored
    instance matched at most once, and a pair merges only at similarity >=
    ``threshold``.  A merge unions the point sets and moves the stored
    feature to the renormalized mix ``alpha * new + (1 - alpha) * old``;
    unmatched queries open new instances.
    """
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ShapeError(f"features must be (L, C), got {features.shape}")
    if len(point_sets) != features.shape[0]:
        raise ShapeError("one point set required per query")
    _check_unit(features, "query")
    stored = store.feature_matrix()
    _check_unit(stored, "stored")
    if class_ids is None:
        class_ids = [0] * features.shape[0]

    n_cur = features.shape[0]
    assigned = [-1] * n_cur
    merged = 0
    if n_cur and len(store):
        sim = features @ stored.T
        order = np.argsort(-sim, axis=None, kind="stable")
        used_cur = np.zeros(n_cur, dtype=bool)
        used_store = np.zeros(len(store), dtype=bool)
        for flat in order:
            i, j = divmod(int(flat), len(store))
            if sim[i, j] < threshold:
                break
            if used_cur[i] or used_store[j]:
                continue
            used_cur[i] = used_store[j] = True
            inst = store.instances[j]
            inst.points = np.union1d(inst.points, np.asarray(point_sets[i], dtype=np.int64))
            mixed = alpha * features[i] + (1.0 - alpha) * inst.feature
            norm = np.linalg.norm(mixed)
            if norm > 1e-8:
                inst.feature = (mixed / norm).astype(np.float32)
            inst.last_seen = frame_id
            inst.class_id = int(class_ids[i])
            assigned[i] = inst.instance_id
            merged += 1

    created = 0
    for i in range(n_cur):
        if assigned[i] >= 0:
            continue
        inst = Instance(
            instance_id=store._next_id,
            feature=features[i].copy(),
            points=np.unique(np.asarray(point_sets[i], dtype=np.int64)),
            last_seen=frame_id,
            class_id=int(class_ids[i]),
        )
        store._next_id += 1
        store.instances.append(inst)
        assigned[i] = inst.instance_id
        created += 1
    return MergeOutcome(assigned, merged, created)


def brute_force_matching(sim: np.ndarray, threshold: float):
    """Exhaustive best one-to-one matching with per-pair threshold.

    Test oracle: enumerates every injective assignment of current rows to
    stored columns whose pairs all clear the threshold and returns the set
    maximizing total similarity.  Exponential; keep inputs tiny.
    """
    n, m = sim.shape
    best_pairs, best_score = frozenset(), 0.0
    cols = list(range(m))
    for k in range(0, min(n, m) + 1):
        for rows in itertools.combinations(range(n), k):
            for perm in itertools.permutations(cols, k):
                if all(sim[r, c] >= threshold for r, c in zip(rows, perm)):
                    score = sum(sim[r, c] for r, c in zip(rows, perm))
                    if score > best_score + 1e-12:
                        best_score = score
                        best_pairs = frozenset(zip(rows, perm))
    return best_pairs, best_score


def instance_records(store: InstanceStore, scene_points: np.ndarray) -> list:
    """JSON-ready per-instance summaries (deterministic field order)."""
    records = []
    for inst in store.instances:
        pts = scene_points[inst.points]
        records.append({
            "instance_id": inst.instance_id,
            "class_id": inst.class_id,
            "point_count": int(inst.points.size),
            "bbox_min": [float(v) for v in pts.min(axis=0)],
            "bbox_max": [float(v) for v in pts.max(axis=0)],
            "last_seen": inst.last_seen,
            "feature_crc32": f"{zlib.crc32(inst.feature.tobytes()):08x}",
        })
    return records
