"""Loss values against hand-computed oracles, and gradients against central
finite differences."""

import numpy as np
import pytest

from pointbox import (
    ImageGrid,
    PointAnnotation,
    ValidationError,
    build_affinity,
    color_prior_loss,
    grad_check,
    negative_loss,
    positive_loss,
    total_loss,
)
from pointbox.losses import AffinityGraph, _affinity_from_lab


def _two_pixel_graph():
    return AffinityGraph(1, 2, np.array([0, 1]), np.array([1, 0]),
                         np.array([1.0, 1.0]), 2.0)


class TestPositiveLoss:
    def test_perfect_prediction(self):
        scores = np.full((2, 2, 1), 1.0)
        value, grad = positive_loss(scores, [PointAnnotation(0, 0, 1, 1)])
        assert value < 1e-5

    def test_hand_value_single_channel(self):
        # -(1 - 0.5)^2 * ln 0.5
        scores = np.full((1, 1, 1), 0.5)
        value, _ = positive_loss(scores, [PointAnnotation(0, 0, 1, 1)])
        assert value == pytest.approx(0.173287, abs=1e-5)

    def test_hand_value_two_channels(self):
        scores = np.array([[[0.9, 0.2]]])
        value, _ = positive_loss(scores, [PointAnnotation(0, 0, 1, 1)])
        assert value == pytest.approx(0.0099793, abs=1e-5)

    def test_no_points_rejected(self):
        with pytest.raises(ValidationError):
            positive_loss(np.full((2, 2, 1), 0.5), [])

    def test_gradient_support_only_on_points(self):
        scores = np.full((3, 3, 2), 0.4)
        _, grad = positive_loss(scores, [PointAnnotation(1, 2, 1, 1)])
        support = np.argwhere(np.abs(grad).sum(axis=-1) > 0)
        assert support.tolist() == [[2, 1]]

    def test_nonnegative(self, rng):
        for _ in range(20):
            scores = rng.uniform(0.01, 0.99, (3, 3, 2))
            v, _ = positive_loss(scores, [PointAnnotation(1, 1, 2, 1)])
            assert v >= 0.0


class TestNegativeLoss:
    def test_zero_prediction(self):
        scores = np.zeros((2, 2, 1))
        scores[0, 0, 0] = 0.9  # labeled pixel, excluded from the mean
        value, _ = negative_loss(scores, [PointAnnotation(0, 0, 1, 1)])
        assert value == pytest.approx(0.0, abs=1e-10)

    def test_hand_value_single_channel(self):
        scores = np.array([[[0.9], [0.5]]])
        value, _ = negative_loss(scores, [PointAnnotation(0, 0, 1, 1)])
        assert value == pytest.approx(0.173287, abs=1e-5)

    def test_hand_value_two_channels(self):
        scores = np.array([[[0.9, 0.9], [0.1, 0.2]]])
        value, _ = negative_loss(scores, [PointAnnotation(0, 0, 1, 1)])
        assert value == pytest.approx(0.0099793, abs=1e-5)

    def test_fully_labeled_image_rejected(self):
        with pytest.raises(ValidationError):
            negative_loss(np.full((1, 1, 1), 0.5), [PointAnnotation(0, 0, 1, 1)])

    def test_monotone_in_every_unlabeled_score(self, rng):
        points = [PointAnnotation(0, 0, 1, 1)]
        base = rng.uniform(0.1, 0.8, (3, 3, 2))
        v0, _ = negative_loss(base, points)
        for _ in range(10):
            bumped = base.copy()
            r, c, ch = rng.integers(3), rng.integers(3), rng.integers(2)
            if (r, c) == (0, 0):
                continue
            bumped[r, c, ch] += 0.05
            v1, _ = negative_loss(bumped, points)
            assert v1 >= v0


class TestAffinity:
    def test_constant_image(self, flat_image):
        graph = build_affinity(flat_image)
        # 8-neighborhood over 8x9: all pairs kept with weight 1
        h, w = 8, 9
        directed = 2 * ((h - 1) * w + h * (w - 1) + 2 * (h - 1) * (w - 1))
        assert graph.weight.size == directed
        np.testing.assert_array_equal(graph.weight, np.ones(directed))
        assert graph.z == pytest.approx(directed)

    def test_two_region_cut(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        img[:, 2:] = 255
        graph = build_affinity(ImageGrid(img), threshold=0.3, sigma=10.0)
        cols = np.stack([graph.src % 4, graph.dst % 4])
        crossing = ((cols[0] <= 1) & (cols[1] >= 2)) | ((cols[0] >= 2) & (cols[1] <= 1))
        assert not crossing.any()

    def test_threshold_boundary_inclusive(self):
        # equal colors give weight exactly 1.0; keep them at threshold 1.0
        lab = np.zeros((1, 2, 3))
        graph = _affinity_from_lab(lab, threshold=1.0, sigma=10.0)
        assert graph.weight.size == 2
        np.testing.assert_array_equal(graph.weight, [1.0, 1.0])

    def test_weight_at_exact_threshold_distance(self):
        # Lab distance sigma*ln(1/0.3) makes the similarity exactly 0.3
        sigma = 10.0
        d = sigma * np.log(1.0 / 0.3)
        lab = np.zeros((1, 2, 3))
        lab[0, 1, 0] = d
        graph = _affinity_from_lab(lab, threshold=0.3, sigma=sigma)
        if graph.weight.size:  # kept iff float rounding lands at >= 0.3
            np.testing.assert_allclose(graph.weight, 0.3, atol=1e-12)
        slightly_inside = lab.copy()
        slightly_inside[0, 1, 0] = d * (1 - 1e-9)
        kept = _affinity_from_lab(slightly_inside, threshold=0.3, sigma=sigma)
        assert kept.weight.size == 2
        np.testing.assert_allclose(kept.weight, 0.3, atol=1e-9)

    def test_symmetry(self, noise_image):
        graph = build_affinity(noise_image)
        fwd = {(int(s), int(d)): w for s, d, w in zip(graph.src, graph.dst, graph.weight)}
        for (s, d), w in fwd.items():
            assert fwd[(d, s)] == w


class TestColorPriorLoss:
    def test_empty_graph(self):
        graph = AffinityGraph(2, 2, np.array([], dtype=int), np.array([], dtype=int),
                              np.array([]), 0.0)
        value, grad = color_prior_loss(np.full((2, 2, 1), 0.5), graph)
        assert value == 0.0
        assert not grad.any()

    def test_identical_onehot_distributions(self):
        # score 1 on one channel: p = (1, 0) everywhere -> -log 1 = 0
        scores = np.zeros((1, 2, 2))
        scores[..., 0] = 1.0
        value, _ = color_prior_loss(scores, _two_pixel_graph())
        assert value == pytest.approx(0.0, abs=1e-5)

    def test_hand_two_pixel_value(self):
        # C=1, score 0.5 -> p = (0.5, 0.5); -log(p.p) = -log 0.5
        scores = np.full((1, 2, 1), 0.5)
        value, _ = color_prior_loss(scores, _two_pixel_graph())
        assert value == pytest.approx(0.693147, abs=1e-5)

    def test_relabeling_invariance(self, rng):
        # permuting pixel indices permutes the graph consistently
        h, w, c = 2, 3, 2
        scores = rng.uniform(0.1, 0.9, (h, w, c))
        src = np.array([0, 1, 3, 4, 1, 5])
        dst = np.array([1, 0, 4, 3, 5, 1])
        weight = rng.uniform(0.3, 1.0, 6)
        graph = AffinityGraph(h, w, src, dst, weight, float(weight.sum()))
        v1, _ = color_prior_loss(scores, graph)
        perm = rng.permutation(h * w)
        inv = np.argsort(perm)
        scores2 = scores.reshape(-1, c)[inv].reshape(h, w, c)
        graph2 = AffinityGraph(h, w, perm[src], perm[dst], weight, float(weight.sum()))
        v2, _ = color_prior_loss(scores2, graph2)
        assert v1 == pytest.approx(v2, abs=1e-12)


class TestTotalLoss:
    def test_alpha2_zero_drops_color(self, rng, noise_image):
        scores = rng.uniform(0.1, 0.9, (12, 14, 2))
        points = [PointAnnotation(3, 4, 1, 1)]
        report, _ = total_loss(scores, points, noise_image, alpha2=0.0)
        assert report.color_prior == 0.0
        assert report.total == pytest.approx(report.positive + report.alpha1 * report.negative)

    def test_two_pixel_alpha1(self, rng):
        scores = rng.uniform(0.2, 0.8, (2, 1, 1))
        img = ImageGrid(np.full((2, 1, 3), 80, dtype=np.uint8))
        report, _ = total_loss(scores, [PointAnnotation(0, 0, 1, 1)], img)
        assert report.n_pos == 1 and report.n_neg == 1
        assert report.alpha1 == 1.0

    def test_composition_matches_components(self, rng, noise_image):
        scores = rng.uniform(0.1, 0.9, (12, 14, 2))
        points = [PointAnnotation(3, 4, 1, 1), PointAnnotation(7, 8, 2, 2)]
        affinity = build_affinity(noise_image)
        report, grad = total_loss(scores, points, affinity=affinity)
        pv, pg = positive_loss(scores, points)
        nv, ng = negative_loss(scores, points)
        cv, cg = color_prior_loss(scores, affinity)
        assert report.total == pytest.approx(pv + report.alpha1 * nv + cv, abs=1e-9)
        np.testing.assert_allclose(grad, pg + report.alpha1 * ng + cg, atol=1e-12)

    def test_single_pixel_image_skips_negative(self):
        scores = np.full((1, 1, 1), 0.4)
        img = ImageGrid(np.full((1, 1, 3), 60, dtype=np.uint8))
        report, _ = total_loss(scores, [PointAnnotation(0, 0, 1, 1)], img)
        assert report.n_neg == 0 and report.alpha1 == 0.0
        assert report.negative == 0.0


class TestGradCheck:
    def test_linear_loss_exact(self):
        w = np.array([1.5, -2.0, 0.25])

        def linear(x):
            return float(w @ x), w

        assert grad_check(linear, np.array([0.3, 0.4, 0.5])) < 1e-10

    @pytest.mark.parametrize("seed", range(8))
    def test_positive_loss_gradient(self, seed):
        rng = np.random.default_rng(seed)
        h, w, c = rng.integers(2, 5), rng.integers(2, 5), rng.integers(1, 4)
        scores = rng.uniform(0.05, 0.95, (h, w, c))
        points = [PointAnnotation(int(rng.integers(w)), int(rng.integers(h)),
                                  int(rng.integers(1, c + 1)), 1)]

        def fn(flat):
            v, g = positive_loss(flat.reshape(h, w, c), points)
            return v, g.ravel()

        assert grad_check(fn, scores.ravel()) < 1e-4

    @pytest.mark.parametrize("seed", range(8))
    def test_color_prior_gradient(self, seed):
        rng = np.random.default_rng(seed)
        h, w, c = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
        scores = rng.uniform(0.05, 0.95, (h, w, c))
        img = ImageGrid(np.clip(rng.normal(120, 45, (h, w, 3)), 0, 255).astype(np.uint8))
        affinity = build_affinity(img)

        def fn(flat):
            v, g = color_prior_loss(flat.reshape(h, w, c), affinity)
            return v, g.ravel()

        assert grad_check(fn, scores.ravel()) < 1e-4
