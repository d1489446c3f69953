import numpy as np
import pytest

from sfpn.errors import (
    EmptyBatch,
    InvalidBox,
    NumericalError,
    RangeError,
    ShapeError,
    ZeroVector,
)
from sfpn.losses import (
    FrameSupervision,
    LossWeights,
    bce_loss,
    combine_frame_components,
    contrastive_loss,
    cross_frame_loss,
    dice_loss,
    fd_gradient,
    iou_loss,
    per_frame_loss,
    sem_loss,
    total_loss,
)


def rel_err(analytic, numeric):
    scale = max(np.abs(numeric).max(), 1e-8)
    return np.abs(analytic - numeric).max() / scale


class TestBce:
    def test_zero_logits_is_ln2(self):
        loss, _ = bce_loss(np.zeros(7), np.array([0, 1, 0, 1, 1, 0, 1]))
        assert abs(loss - np.log(2)) < 1e-12

    def test_saturated_correct_is_tiny(self):
        loss, _ = bce_loss(np.full(4, 50.0), np.ones(4))
        assert loss <= 1e-20

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.uniform(-3, 3, size=8)
            y = rng.integers(0, 2, size=8).astype(float)
            _, grad = bce_loss(x, y)
            fd = fd_gradient(lambda v: bce_loss(v, y)[0], x.copy(), h=1e-6)
            assert rel_err(grad, fd) < 1e-4

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss(np.zeros(3), np.zeros(4))


class TestDice:
    def test_perfect_overlap_is_zero(self):
        y = np.array([1.0, 0.0, 1.0, 1.0])
        loss, _ = dice_loss(y, y)
        assert abs(loss) < 1e-6

    def test_disjoint_approaches_one(self):
        y = np.zeros(1000)
        y[:500] = 1.0
        loss, _ = dice_loss(1.0 - y, y)
        assert loss >= 0.99

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = rng.uniform(0.05, 0.95, size=10)
            y = rng.integers(0, 2, size=10).astype(float)
            _, grad = dice_loss(p, y)
            fd = fd_gradient(lambda v: dice_loss(v, y)[0], p.copy(), h=1e-6)
            assert rel_err(grad, fd) < 1e-4

    def test_out_of_range_rejected(self):
        with pytest.raises(RangeError):
            dice_loss(np.array([1.2]), np.array([1.0]))


def box(mn, mx):
    return np.array([mn, mx], dtype=np.float64)


class TestIou:
    def test_identical_boxes(self):
        b = box([0, 0, 0], [1, 2, 3])
        loss, grad = iou_loss(b, b)
        assert loss == 0.0

    def test_disjoint_boxes(self):
        loss, grad = iou_loss(box([0, 0, 0], [1, 1, 1]), box([5, 5, 5], [6, 6, 6]))
        assert loss == 1.0
        assert np.all(grad == 0)

    def test_shifted_unit_cube_analytic(self):
        loss, _ = iou_loss(box([0, 0, 0], [1, 1, 1]), box([0.5, 0, 0], [1.5, 1, 1]))
        assert abs(loss - 2.0 / 3.0) < 1e-12

    def test_monte_carlo_volume_confirms_analytic(self):
        rng = np.random.default_rng(2)
        pred = box([0, 0, 0], [1, 1, 1])
        gt = box([0.5, 0, 0], [1.5, 1, 1])
        pts = rng.uniform(-0.5, 2.0, size=(200_000, 3))
        in_pred = np.all((pts >= pred[0]) & (pts <= pred[1]), axis=1)
        in_gt = np.all((pts >= gt[0]) & (pts <= gt[1]), axis=1)
        iou_mc = (in_pred & in_gt).sum() / (in_pred | in_gt).sum()
        loss, _ = iou_loss(pred, gt)
        assert abs((1.0 - loss) - iou_mc) < 0.01

    @staticmethod
    def near_tie(pred, gt, delta=1e-3):
        p, g = pred.reshape(2, 3), gt.reshape(2, 3)
        close = (np.abs(p - g) < delta).any()
        ext = np.minimum(p[1], g[1]) - np.maximum(p[0], g[0])
        return close or (np.abs(ext) < delta).any()

    def test_gradient_matches_fd_away_from_ties(self):
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 20:
            c1 = rng.uniform(-1, 1, 3)
            c2 = rng.uniform(-1, 1, 3)
            pred = box(c1 - rng.uniform(0.3, 1, 3), c1 + rng.uniform(0.3, 1, 3))
            gt = box(c2 - rng.uniform(0.3, 1, 3), c2 + rng.uniform(0.3, 1, 3))
            if self.near_tie(pred, gt):
                continue
            _, grad = iou_loss(pred, gt)
            fd = fd_gradient(lambda v: iou_loss(v.reshape(2, 3), gt)[0],
                             pred.reshape(-1).copy(), h=1e-6).reshape(2, 3)
            assert rel_err(grad, fd) < 1e-4
            checked += 1

    def test_inverted_box_rejected(self):
        with pytest.raises(InvalidBox):
            iou_loss(box([1, 0, 0], [0, 1, 1]), box([0, 0, 0], [1, 1, 1]))


class TestSem:
    def test_single_class_zero_logit(self):
        loss, _ = sem_loss(np.zeros(1), 0)
        assert abs(loss - np.log(2)) < 1e-12

    def test_confident_correct(self):
        logits = np.full(5, -50.0)
        logits[2] = 50.0
        loss, _ = sem_loss(logits, 2)
        assert loss <= 1e-20

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = rng.uniform(-3, 3, size=6)
            label = int(rng.integers(0, 6))
            _, grad = sem_loss(x, label)
            fd = fd_gradient(lambda v: sem_loss(v, label)[0], x.copy(), h=1e-6)
            assert rel_err(grad, fd) < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(RangeError):
            sem_loss(np.zeros(3), 3)


def random_supervision(rng, n_queries=3, n_points=12, k=4):
    centers = rng.uniform(-1, 1, (n_queries, 3))
    sizes = rng.uniform(0.4, 1.0, (n_queries, 3))
    gt_boxes = np.stack([centers - sizes, centers + sizes], axis=1)
    pred_boxes = gt_boxes + rng.normal(scale=0.05, size=gt_boxes.shape)
    pred_boxes = np.stack([pred_boxes.min(axis=1), pred_boxes.max(axis=1)], axis=1)
    return FrameSupervision(
        gt_class=rng.integers(0, 2, n_queries),
        gt_masks=rng.integers(0, 2, (n_queries, n_points)),
        gt_boxes=gt_boxes,
        gt_sem=rng.integers(0, k, n_queries),
        mask_logits=rng.uniform(-2, 2, (n_queries, n_points)),
        pred_boxes=pred_boxes,
        class_logits=rng.uniform(-2, 2, n_queries),
        sem_logits=rng.uniform(-2, 2, (n_queries, k)),
    )


class TestPerFrame:
    def test_hand_constructed_components(self):
        w = LossWeights(alpha=0.5, beta=0.5)
        assert combine_frame_components(2, 3, 1, 4, 5, w) == 12.0

    def test_all_zero_components(self):
        assert combine_frame_components(0, 0, 0, 0, 0, LossWeights()) == 0.0

    def test_mean_decomposition_over_frames(self):
        rng = np.random.default_rng(5)
        frames = [random_supervision(rng) for _ in range(3)]
        w = LossWeights()
        total, _ = per_frame_loss(frames, w)
        singles = [per_frame_loss([f], w)[0] for f in frames]
        assert abs(total - np.mean(singles)) < 1e-12

    def test_permutation_invariant_over_frames(self):
        rng = np.random.default_rng(6)
        frames = [random_supervision(rng) for _ in range(4)]
        a, _ = per_frame_loss(frames)
        b, _ = per_frame_loss(frames[::-1])
        assert abs(a - b) < 1e-12

    def test_breakdown_keys(self):
        rng = np.random.default_rng(7)
        _, breakdown = per_frame_loss([random_supervision(rng)])
        assert set(breakdown) == {"cls", "bce", "dice", "iou", "sem"}
        assert all(v >= 0 for v in breakdown.values())

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            per_frame_loss([])


class TestContrastive:
    def test_closed_form_two_pairs_orthogonal(self):
        tau = 0.07
        f = np.array([[1.0, 0.0], [0.0, 1.0]])
        res = contrastive_loss(f, f.copy(), tau)
        want = -np.log(np.exp(1 / tau) / (np.exp(1 / tau) + np.exp(0.0)))
        assert abs(res.loss - want) < 1e-6

    def test_scale_invariance(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(4, 6))
        base = contrastive_loss(a, b).loss
        for i in range(4):
            scaled = a.copy()
            scaled[i] *= 37.5
            assert abs(contrastive_loss(scaled, b).loss - base) < 1e-6
            scaled_b = b.copy()
            scaled_b[i] *= 0.003
            assert abs(contrastive_loss(a, scaled_b).loss - base) < 1e-6

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            a = rng.normal(size=(5, 4))
            b = rng.normal(size=(5, 4))
            res = contrastive_loss(a, b)
            fd_a = fd_gradient(lambda v: contrastive_loss(v.reshape(5, 4), b).loss,
                               a.reshape(-1).copy(), h=1e-6).reshape(5, 4)
            fd_b = fd_gradient(lambda v: contrastive_loss(a, v.reshape(5, 4)).loss,
                               b.reshape(-1).copy(), h=1e-6).reshape(5, 4)
            assert rel_err(res.grad_anchor, fd_a) < 1e-4
            assert rel_err(res.grad_other, fd_b) < 1e-4

    def test_single_pair_degenerate(self):
        res = contrastive_loss(np.ones((1, 3)), np.ones((1, 3)))
        assert res.loss == 0.0
        assert res.degenerate
        assert np.all(res.grad_anchor == 0)

    def test_zero_vector_rejected(self):
        with pytest.raises(ZeroVector):
            contrastive_loss(np.zeros((2, 3)), np.ones((2, 3)))

    def test_bad_tau(self):
        with pytest.raises(RangeError):
            contrastive_loss(np.ones((2, 3)), np.ones((2, 3)), tau=0.0)


class TestCrossFrame:
    def test_single_frame_is_zero(self):
        rng = np.random.default_rng(10)
        assert cross_frame_loss([rng.normal(size=(3, 4))]) == 0.0

    def test_two_identical_frames_symmetric(self):
        rng = np.random.default_rng(11)
        f = rng.normal(size=(4, 5))
        l2 = cross_frame_loss([f, f.copy()])
        fwd = contrastive_loss(f, f).loss
        bwd = contrastive_loss(f, f).loss
        assert abs(l2 - 0.5 * (fwd + bwd)) < 1e-12

    def test_four_frames_enumeration(self):
        rng = np.random.default_rng(12)
        frames = [rng.normal(size=(3, 6)) for _ in range(4)]
        l2 = cross_frame_loss(frames)
        terms = [
            contrastive_loss(frames[0], frames[1]).loss,
            contrastive_loss(frames[1], frames[2]).loss,
            contrastive_loss(frames[1], frames[0]).loss,
            contrastive_loss(frames[2], frames[3]).loss,
            contrastive_loss(frames[2], frames[1]).loss,
            contrastive_loss(frames[3], frames[2]).loss,
        ]
        assert abs(l2 - sum(terms) / 4.0) < 1e-12

    def test_empty_sequence(self):
        with pytest.raises(EmptyBatch):
            cross_frame_loss([])


class TestTotal:
    def test_zero(self):
        assert total_loss(0.0, 0.0) == 0.0

    def test_arithmetic(self):
        assert total_loss(2.0, 4.0, LossWeights(lambda1=0.5, lambda2=0.5)) == 3.0

    def test_linearity(self):
        rng = np.random.default_rng(13)
        w = LossWeights(lambda1=0.7, lambda2=0.2)
        for _ in range(10):
            l1, l2, c = rng.uniform(0, 5, 3)
            assert abs(total_loss(c * l1, l2, w)
                       - (c * w.lambda1 * l1 + w.lambda2 * l2)) < 1e-12

    def test_non_finite_rejected(self):
        with pytest.raises(NumericalError):
            total_loss(np.inf, 0.0)


class TestFdGradient:
    def test_quadratic(self):
        g = fd_gradient(lambda v: float(v[0] ** 2), np.array([3.0]))
        assert abs(g[0] - 6.0) < 1e-6

    def test_affine_exact(self):
        a = np.array([2.0, -1.0, 0.5])
        g = fd_gradient(lambda v: float(a @ v + 7.0), np.zeros(3), h=0.3)
        np.testing.assert_allclose(g, a, atol=1e-12)

    def test_non_finite_detected(self):
        with np.errstate(invalid="ignore"), pytest.raises(NumericalError):
            fd_gradient(lambda v: float(np.log(v[0])), np.array([0.00001]), h=1e-3)

    def test_bad_step(self):
        with pytest.raises(RangeError):
            fd_gradient(lambda v: 0.0, np.zeros(1), h=0.0)


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.alpha, w.beta, w.lambda1, w.lambda2, w.tau) == (0.5, 0.5, 0.5, 0.5, 0.07)

    def test_positive_required(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=0.0)


class TestBounds:
    def test_losses_nonnegative_and_bounded(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            x = rng.uniform(-5, 5, 10)
            y = rng.integers(0, 2, 10).astype(float)
            assert bce_loss(x, y)[0] >= 0
            d, _ = dice_loss(rng.uniform(0, 1, 10), y)
            assert 0 <= d <= 1 + 1e-6
            c1, c2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
            pred = box(c1 - rng.uniform(0.1, 1, 3), c1 + rng.uniform(0.1, 1, 3))
            gt = box(c2 - rng.uniform(0.1, 1, 3), c2 + rng.uniform(0.1, 1, 3))
            il, _ = iou_loss(pred, gt)
            assert 0 <= il <= 1
            assert sem_loss(rng.uniform(-5, 5, 4), int(rng.integers(0, 4)))[0] >= 0
            res = contrastive_loss(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
            assert res.loss >= 0 and np.isfinite(res.loss)
