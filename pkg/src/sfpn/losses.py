"""Supervision losses with analytic gradients.

Per-frame terms (foreground classification, mask BCE + Dice, box IoU,
semantic BCE) combine as ``mean_t(alpha * cls + bce + dice + beta * iou +
sem)``; the cross-frame term is a temperature-scaled cosine InfoNCE between
matched instances of adjacent frames, averaged in both directions with the
sequence-boundary terms zero.  All gradients are w.r.t. predictions and are
finite-difference checked in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyBatch,
    InvalidBox,
    NumericalError,
    RangeError,
    ShapeError,
    ZeroVector,
)

DICE_SMOOTHING = 1.0


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    lambda1: float = 0.5
    lambda2: float = 0.5
    tau: float = 0.07

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda1", "lambda2", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def bce_loss(logits, targets):
    """Mean binary cross-entropy on logits; returns (loss, d loss / d logits).

    Uses the log-sum-exp form ``max(x, 0) - x*y + log(1 + exp(-|x|))`` so
    saturated logits stay finite.
    """
    x = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"logits {x.shape} and targets {y.shape} differ")
    if not np.all(np.isfinite(x)):
        raise NumericalError("logits contain non-finite values")
    n = x.size
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))
    return float(per.mean()), (sig - y) / n


def dice_loss(probs, targets):
    """Soft Dice loss with smoothing 1.0; returns (loss, d loss / d probs)."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ShapeError(f"probs {p.shape} and targets {y.shape} differ")
    if np.any(p < 0) or np.any(p > 1):
        raise RangeError("probabilities must lie in [0, 1]")
    eps = DICE_SMOOTHING
    num = 2.0 * float(p @ y) + eps
    den = float(p.sum() + y.sum()) + eps
    loss = 1.0 - num / den
    grad = -(2.0 * y * den - num) / den ** 2
    return loss, grad


def _box_checked(box, what):
    b = np.asarray(box, dtype=np.float64).reshape(2, 3)
    if np.any(b[0] > b[1]):
        raise InvalidBox(f"{what} box has min > max")
    return b


def iou_loss(pred_box, gt_box):
    """1 - 3D axis-aligned IoU; returns (loss, gradient w.r.t. pred corners).

    The gradient is the piecewise-smooth corner derivative with subgradient
    0 at ties and for empty intersections.  Gradient shape matches the
    (2, 3) pred corner layout.
    """
    p = _box_checked(pred_box, "pred")
    g = _box_checked(gt_box, "gt")
    lo = np.maximum(p[0], g[0])
    hi = np.minimum(p[1], g[1])
    ext = hi - lo
    grad = np.zeros((2, 3), dtype=np.float64)
    if np.any(ext <= 0):
        return 1.0, grad
    inter = float(np.prod(ext))
    vp = float(np.prod(p[1] - p[0]))
    vg = float(np.prod(g[1] - g[0]))
    union = vp + vg - inter
    iou = inter / union

    # d inter / d corner: active only where the pred corner is the binding one
    d_inter = np.zeros((2, 3))
    for k in range(3):
        others = inter / ext[k]
        if p[0, k] > g[0, k]:
            d_inter[0, k] = -others
        if p[1, k] < g[1, k]:
            d_inter[1, k] = others
    d_vp = np.zeros((2, 3))
    for k in range(3):
        others = vp / (p[1, k] - p[0, k]) if p[1, k] > p[0, k] else 0.0
        d_vp[0, k] = -others
        d_vp[1, k] = others
    d_union = d_vp - d_inter
    d_iou = (d_inter * union - inter * d_union) / union ** 2
    return 1.0 - iou, -d_iou


def sem_loss(sem_logits, gt_label):
    """One-vs-rest binary cross-entropy against the one-hot target,
    averaged over the K classes; returns (loss, gradient)."""
    x = np.asarray(sem_logits, dtype=np.float64).ravel()
    k = x.size
    if k < 1:
        raise ShapeError("sem_logits must have at least one class")
    label = int(gt_label)
    if label < 0 or label >= k:
        raise RangeError(f"label {label} out of range for {k} classes")
    onehot = np.zeros(k)
    onehot[label] = 1.0
    return bce_loss(x, onehot)


@dataclass
class FrameSupervision:
    """Targets and predictions for one frame's queries.

    Masks are (L, N) over the frame's points; boxes are (L, 2, 3) min/max
    corners in meters; class logits are one foreground score per query.
    """

    gt_class: np.ndarray
    gt_masks: np.ndarray
    gt_boxes: np.ndarray
    gt_sem: np.ndarray
    mask_logits: np.ndarray
    pred_boxes: np.ndarray
    class_logits: np.ndarray
    sem_logits: np.ndarray

    def __post_init__(self):
        self.gt_class = np.asarray(self.gt_class, dtype=np.float64).ravel()
        self.gt_masks = np.asarray(self.gt_masks, dtype=np.float64)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 2, 3)
        self.gt_sem = np.asarray(self.gt_sem, dtype=np.int64).ravel()
        self.mask_logits = np.asarray(self.mask_logits, dtype=np.float64)
        self.pred_boxes = np.asarray(self.pred_boxes, dtype=np.float64).reshape(-1, 2, 3)
        self.class_logits = np.asarray(self.class_logits, dtype=np.float64).ravel()
        self.sem_logits = np.asarray(self.sem_logits, dtype=np.float64)
        n_q = self.gt_class.size
        for name in ("gt_masks", "gt_boxes", "gt_sem", "mask_logits",
                     "pred_boxes", "class_logits", "sem_logits"):
            if getattr(self, name).shape[0] != n_q:
                raise ShapeError(f"{name} does not have one row per query")
        if self.gt_masks.shape != self.mask_logits.shape:
            raise ShapeError("gt_masks and mask_logits shapes differ")
        for b, what in ((self.gt_boxes, "gt"), (self.pred_boxes, "pred")):
            if np.any(b[:, 0] > b[:, 1]):
                raise InvalidBox(f"{what} boxes must satisfy min <= max")

    @property
    def num_queries(self) -> int:
        return self.gt_class.size


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def frame_components(fs: FrameSupervision) -> dict:
    """The five scalar loss components of one frame."""
    cls, _ = bce_loss(fs.class_logits, fs.gt_class)
    bce, _ = bce_loss(fs.mask_logits.ravel(), fs.gt_masks.ravel())
    dice_terms = [dice_loss(_sigmoid(fs.mask_logits[i]), fs.gt_masks[i])[0]
                  for i in range(fs.num_queries)]
    iou_terms = [iou_loss(fs.pred_boxes[i], fs.gt_boxes[i])[0]
                 for i in range(fs.num_queries)]
    sem_terms = [sem_loss(fs.sem_logits[i], fs.gt_sem[i])[0]
                 for i in range(fs.num_queries)]
    return {
        "cls": cls,
        "bce": bce,
        "dice": float(np.mean(dice_terms)),
        "iou": float(np.mean(iou_terms)),
        "sem": float(np.mean(sem_terms)),
    }


def combine_frame_components(cls, bce, dice, iou, sem, weights: LossWeights) -> float:
    """One frame's weighted sum: alpha*cls + bce + dice + beta*iou + sem."""
    return weights.alpha * cls + bce + dice + weights.beta * iou + sem


def per_frame_loss(frames, weights: LossWeights | None = None):
    """Mean weighted component sum over frames; returns (loss, breakdown)."""
    if weights is None:
        weights = LossWeights()
    if len(frames) == 0:
        raise EmptyBatch("per_frame_loss needs at least one frame")
    comps = [frame_components(f) for f in frames]
    totals = [combine_frame_components(c["cls"], c["bce"], c["dice"],
                                       c["iou"], c["sem"], weights) for c in comps]
    breakdown = {k: float(np.mean([c[k] for c in comps]))
                 for k in ("cls", "bce", "dice", "iou", "sem")}
    return float(np.mean(totals)), breakdown


@dataclass
class ContrastiveResult:
    loss: float
    grad_anchor: np.ndarray
    grad_other: np.ndarray
    degenerate: bool = False


def _unit_rows(f, what):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError(f"{what} must be (Z, C), got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise NumericalError(f"{what} contains non-finite values")
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms < 1e-12):
        raise ZeroVector(f"{what} contains a zero vector")
    return f, f / norms[:, None], norms


def contrastive_loss(anchor_features, other_features, tau: float = 0.07) -> ContrastiveResult:
    """Directed InfoNCE over matched instance pairs (row i of each side is
    the same instance).  Similarities are cosines, so the loss is invariant
    to positive rescaling of any feature vector.  The single-pair case has
    no negatives: the loss is defined as 0 and flagged degenerate.
    """
    if tau <= 0:
        raise RangeError(f"tau must be positive, got {tau}")
    fa, ua, na = _unit_rows(anchor_features, "anchor features")
    fb, ub, nb = _unit_rows(other_features, "other features")
    if fa.shape != fb.shape:
        raise ShapeError(f"feature sets differ in shape: {fa.shape} vs {fb.shape}")
    z = fa.shape[0]
    if z == 1:
        return ContrastiveResult(0.0, np.zeros_like(fa), np.zeros_like(fb), degenerate=True)

    sim = ua @ ub.T
    logits = sim / tau
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float(np.mean(lse - np.diag(logits)))

    # d loss / d sim = (softmax - identity) / (Z * tau)
    p = np.exp(logits - lse[:, None])
    d_sim = (p - np.eye(z)) / (z * tau)
    d_ua = d_sim @ ub
    d_ub = d_sim.T @ ua
    # through row normalization: du/df = (I - u u^T) / |f|
    grad_a = (d_ua - ua * (d_ua * ua).sum(axis=1, keepdims=True)) / na[:, None]
    grad_b = (d_ub - ub * (d_ub * ub).sum(axis=1, keepdims=True)) / nb[:, None]
    return ContrastiveResult(loss, grad_a, grad_b)


def cross_frame_loss(frame_features, tau: float = 0.07) -> float:
    """Bidirectional contrastive consistency over a sequence.

    ``frame_features`` is a list of (Z, C) arrays whose rows are matched by
    ground-truth instance identity; adjacent frames must agree on Z.  The
    t -> t+1 term at the last frame and the t -> t-1 term at the first are
    zero by definition, so a single frame yields 0.
    """
    t_len = len(frame_features)
    if t_len == 0:
        raise EmptyBatch("cross_frame_loss needs at least one frame")
    total = 0.0
    for t in range(t_len):
        if t + 1 < t_len:
            total += contrastive_loss(frame_features[t], frame_features[t + 1], tau).loss
        if t - 1 >= 0:
            total += contrastive_loss(frame_features[t], frame_features[t - 1], tau).loss
    return total / t_len


def total_loss(l1: float, l2: float, weights: LossWeights | None = None) -> float:
    """lambda1 * L1 + lambda2 * L2."""
    if weights is None:
        weights = LossWeights()
    if not (np.isfinite(l1) and np.isfinite(l2)):
        raise NumericalError("loss terms must be finite")
    return weights.lambda1 * l1 + weights.lambda2 * l2


def fd_gradient(f, x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function (test oracle)."""
    if h <= 0:
        raise RangeError(f"step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"function non-finite near coordinate {k}")
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad
