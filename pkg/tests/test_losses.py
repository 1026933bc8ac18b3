import numpy as np
import pytest

from desclite.errors import ConfigError, ShapeError
from desclite.losses import (
    LossValue,
    combine,
    distance_loss,
    reconstruction_loss,
    softmax_cross_entropy,
    triplet_loss_hardest,
)
from desclite.numerics import pairwise_distance_matrix

from helpers import assert_grad_close, finite_diff_matrix


class TestReconstructionLoss:
    def test_zero_at_equality(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        loss = reconstruction_loss(x, x.copy())
        assert loss.value == 0.0
        assert np.array_equal(loss.grad, np.zeros_like(x))

    def test_single_row(self):
        loss = reconstruction_loss([[1.0, 0.0]], [[0.0, 0.0]])
        assert loss.value == pytest.approx(1.0, abs=1e-15)

    def test_two_rows(self):
        x = np.array([[0.0, 0.0], [1.0, 1.0]])
        y = np.array([[3.0, 4.0], [1.0, 1.0]])
        assert reconstruction_loss(x, y).value == pytest.approx(2.5, abs=1e-15)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 4))
        y = rng.standard_normal((5, 4))
        loss = reconstruction_loss(x, y)
        fd = finite_diff_matrix(lambda m: reconstruction_loss(x, m).value, y)
        assert_grad_close(loss.grad.ravel(), fd)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            reconstruction_loss(np.ones((2, 3)), np.ones((3, 2)))


class TestDistanceLoss:
    def test_isometry_gives_zero(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 3))
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        assert distance_loss(x, x @ q).value <= 1e-12

    def test_exact_zero_on_identical(self):
        x = np.random.default_rng(1).standard_normal((4, 3))
        assert distance_loss(x, x.copy()).value == 0.0

    def test_single_pair_closed_form(self):
        x = np.array([[0.0, 0.0], [5.0, 0.0]])       # d = 5
        xh = np.array([[0.0], [3.0]])                # d = 3
        assert distance_loss(x, xh).value == pytest.approx(np.sqrt(2), abs=1e-12)

    def test_naive_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 6))
        xh = rng.standard_normal((5, 2))
        total = 0.0
        for i in range(5):
            for j in range(5):
                if i == j:
                    continue
                d = np.linalg.norm(x[i] - x[j])
                dh = np.linalg.norm(xh[i] - xh[j])
                total += (d - dh) ** 2
        expected = np.sqrt(total) / (5 * 4)
        assert distance_loss(x, xh).value == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 5))
        xh = rng.standard_normal((6, 3))
        loss = distance_loss(x, xh)
        fd = finite_diff_matrix(lambda m: distance_loss(x, m).value, xh)
        assert_grad_close(loss.grad.ravel(), fd)

    def test_needs_two_rows(self):
        with pytest.raises(ConfigError):
            distance_loss(np.ones((1, 3)), np.ones((1, 2)))


class TestTripletLossHardest:
    def test_inactive_hinge(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        p = np.array([[0.98, 0.199], [0.0, 1.0]])
        # within-pair distances ~0.2 and 0, cross distances ~1.4 > margin+pos
        loss = triplet_loss_hardest(a, p, margin=1.0)
        assert loss.value == 0.0
        assert np.array_equal(loss.grad, np.zeros((4, 2)))

    def test_equal_pos_and_hardest_gives_margin(self):
        # both rows identical: D[i][i] = hardest = 0, each term = margin
        a = np.array([[1.0, 0.0], [1.0, 0.0]])
        loss = triplet_loss_hardest(a, a.copy(), margin=0.7)
        assert loss.value == pytest.approx(0.7, abs=1e-15)

    def test_bruteforce_mining_oracle(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((6, 4))
        p = rng.standard_normal((6, 4))
        m = 1.0
        d = pairwise_distance_matrix(a, p)
        expected = 0.0
        for i in range(6):
            cands = [d[i, j] for j in range(6) if j != i]
            cands += [d[j, i] for j in range(6) if j != i]
            expected += max(0.0, m + d[i, i] - min(cands))
        expected /= 6
        assert triplet_loss_hardest(a, p, m).value == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((5, 3))
        p = a + 0.3 * rng.standard_normal((5, 3))  # keep hinges active
        loss = triplet_loss_hardest(a, p, margin=1.0)

        def value_of(stacked):
            return triplet_loss_hardest(stacked[:5], stacked[5:], 1.0).value

        fd = finite_diff_matrix(value_of, np.vstack([a, p]))
        assert_grad_close(loss.grad.ravel(), fd)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((7, 3))
        p = rng.standard_normal((7, 3))
        perm = rng.permutation(7)
        base = triplet_loss_hardest(a, p, 1.0)
        shuffled = triplet_loss_hardest(a[perm], p[perm], 1.0)
        assert shuffled.value == pytest.approx(base.value, abs=1e-12)
        assert np.allclose(shuffled.grad[:7], base.grad[:7][perm], atol=1e-12)
        assert np.allclose(shuffled.grad[7:], base.grad[7:][perm], atol=1e-12)

    def test_needs_two_pairs(self):
        with pytest.raises(ConfigError):
            triplet_loss_hardest(np.ones((1, 3)), np.ones((1, 3)), 1.0)


class TestSoftmaxCrossEntropy:
    def test_uniform_two_classes(self):
        loss = softmax_cross_entropy([[0.0, 0.0]], [0])
        assert loss.value == pytest.approx(np.log(2), abs=1e-12)

    def test_saturated(self):
        assert softmax_cross_entropy([[100.0, 0.0]], [0]).value < 1e-10

    def test_zero_logits_any_target(self):
        for classes in (2, 5, 9):
            for target in (0, classes - 1):
                loss = softmax_cross_entropy(np.zeros((3, classes)), [target] * 3)
                assert loss.value == pytest.approx(np.log(classes), abs=1e-12)

    def test_extended_precision_oracle(self):
        rng = np.random.default_rng(7)
        logits = rng.standard_normal((4, 7)) * 3
        targets = rng.integers(0, 7, 4)
        wide = logits.astype(np.longdouble)
        probs = np.exp(wide)
        probs /= probs.sum(axis=1, keepdims=True)
        expected = float(-np.log(probs[np.arange(4), targets]).mean())
        assert softmax_cross_entropy(logits, targets).value == pytest.approx(
            expected, abs=1e-10)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(8)
        logits = rng.standard_normal((5, 4))
        targets = rng.integers(0, 4, 5)
        loss = softmax_cross_entropy(logits, targets)
        fd = finite_diff_matrix(
            lambda m: softmax_cross_entropy(m, targets).value, logits)
        assert_grad_close(loss.grad.ravel(), fd)

    def test_value_non_negative(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            logits = rng.standard_normal((3, 5)) * 4
            targets = rng.integers(0, 5, 3)
            assert softmax_cross_entropy(logits, targets).value >= 0.0

    def test_target_out_of_range(self):
        with pytest.raises(ConfigError):
            softmax_cross_entropy(np.zeros((2, 3)), [0, 3])


class TestCombine:
    def test_weight_zero_keeps_main(self):
        rng = np.random.default_rng(0)
        main = LossValue(1.5, rng.standard_normal((3, 2)))
        aux = LossValue(2.0, rng.standard_normal((3, 2)))
        out = combine(main, aux, 0.0)
        assert out.value == main.value
        assert np.array_equal(out.grad, main.grad)

    def test_alpha_weighting(self):
        main = LossValue(1.0, np.zeros((2, 2)))
        aux = LossValue(2.0, np.ones((2, 2)))
        out = combine(main, aux, 0.1)
        assert out.value == pytest.approx(1.2, abs=1e-15)

    def test_beta_weighting(self):
        main = LossValue(1.0, np.zeros((2, 2)))
        aux = LossValue(1.0, np.ones((2, 2)))
        out = combine(main, aux, 3.0)
        assert out.value == pytest.approx(4.0, abs=1e-15)
        assert np.array_equal(out.grad, 3.0 * np.ones((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            combine(LossValue(0.0, np.zeros((2, 2))), LossValue(0.0, np.zeros((3, 2))), 1.0)
