"""Listwise distillation, InfoNCE, the combined objective, and their gradients."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retfit.errors import DataError, NumericError
from retfit.loss import (
    BatchScores,
    LossConfig,
    ScoreGrads,
    backprop_scores_to_embeddings,
    batch_scores_from_embeddings,
    combined_loss,
    cosine_score_matrix,
    infonce_loss,
    listwise_distributions,
    listwise_kl_loss,
    per_query_loss_terms,
)

CFG = LossConfig()


def make_batch(rng, n, k, lo=0.3, hi=0.6):
    cross = rng.uniform(lo, hi, (n, n))
    cross_neg = rng.uniform(lo, hi, (n, n, k))
    tpos = rng.uniform(0.6, 1.0, n)
    tneg = rng.uniform(0.0, 0.4, (n, k))
    return BatchScores(cross, cross_neg, tpos, tneg)


class TestListwiseDistributions:
    def test_uniform_over_20(self):
        p = listwise_distributions(np.zeros(20), tau=0.05)
        np.testing.assert_allclose(p, 0.05, atol=1e-12)

    def test_saturation(self):
        p = listwise_distributions(np.array([1.0, 0.0, 0.0]), tau=0.01)
        assert p[0] > 1 - 1e-12

    def test_hand_softmax(self):
        # softmax([1.0, 0.5, 0.0] / 0.5) = softmax([2, 1, 0])
        p = listwise_distributions(np.array([1.0, 0.5, 0.0]), tau=0.5)
        np.testing.assert_allclose(p, [0.6652, 0.2447, 0.0900], atol=1e-4)

    def test_sums_to_one(self, rng):
        for _ in range(50):
            p = listwise_distributions(rng.uniform(-1, 1, 20), tau=0.05)
            assert abs(p.sum() - 1.0) < 1e-9

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            listwise_distributions(np.array([1.0, np.nan]), tau=0.1)

    @given(
        st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=20),
        st.floats(0.01, 1.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_distribution_properties(self, scores, tau):
        p = listwise_distributions(np.array(scores), tau)
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(p > 0)
        # order-preserving: larger score, at least as much probability
        order = np.argsort(scores)
        assert np.all(np.diff(p[order]) >= -1e-12)


class TestListwiseKL:
    def test_matched_distributions_zero(self):
        # teacher = student * (tau_t / tau_s) makes the two softmaxes equal
        n, k = 4, 19
        rng = np.random.default_rng(3)
        student = rng.uniform(0.0, 1.0 / 6.0, (n, k + 1))
        teacher = student * (CFG.tau_teacher / CFG.tau_student)
        cross = np.zeros((n, n))
        np.fill_diagonal(cross, student[:, 0])
        cross_neg = np.zeros((n, n, k))
        idx = np.arange(n)
        cross_neg[idx, idx, :] = student[:, 1:]
        batch = BatchScores(cross, cross_neg, teacher[:, 0], teacher[:, 1:])
        loss, grads = listwise_kl_loss(batch, CFG)
        assert abs(loss) < 1e-12
        assert np.max(np.abs(grads.d_cross)) < 1e-12
        assert np.max(np.abs(grads.d_cross_neg)) < 1e-12

    def test_kl_non_negative(self, rng):
        for _ in range(50):
            batch = make_batch(rng, int(rng.integers(1, 6)), int(rng.integers(1, 5)))
            loss, _ = listwise_kl_loss(batch, CFG)
            assert loss >= 0.0

    @given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 4))
    @settings(max_examples=100, deadline=None)
    def test_kl_non_negative_property(self, seed, n, k):
        batch = make_batch(np.random.default_rng(seed), n, k)
        loss, _ = listwise_kl_loss(batch, CFG)
        assert loss >= 0.0

    def test_kl_near_equality_stays_small(self):
        # distributions nudged epsilon apart give KL of order epsilon^2
        n, k = 3, 19
        rng = np.random.default_rng(11)
        student = rng.uniform(0.0, 1.0 / 6.0, (n, k + 1))
        teacher = student * (CFG.tau_teacher / CFG.tau_student) + 1e-6 * rng.normal(
            0, 1, (n, k + 1)
        )
        teacher = np.clip(teacher, 0.0, 1.0)
        cross = np.zeros((n, n))
        np.fill_diagonal(cross, student[:, 0])
        cross_neg = np.zeros((n, n, k))
        idx = np.arange(n)
        cross_neg[idx, idx, :] = student[:, 1:]
        batch = BatchScores(cross, cross_neg, teacher[:, 0], teacher[:, 1:])
        loss, _ = listwise_kl_loss(batch, CFG)
        assert 0.0 <= loss < 1e-8

    def test_gradient_formula_on_spec_case(self):
        # n=1, K=1, student [1.0, 0.0], teacher [1.0, 0.0], defaults
        batch = BatchScores(
            np.array([[1.0]]), np.array([[[0.0]]]), np.array([1.0]), np.array([[0.0]])
        )
        loss, grads = listwise_kl_loss(batch, CFG)
        p_s = listwise_distributions(np.array([1.0, 0.0]), CFG.tau_student)
        p_t = listwise_distributions(np.array([1.0, 0.0]), CFG.tau_teacher)
        expected_loss = float(np.sum(p_t * np.log(p_t / p_s)))
        assert loss == pytest.approx(expected_loss, rel=1e-12)
        assert grads.d_cross[0, 0] == pytest.approx((p_s[0] - p_t[0]) / CFG.tau_student, rel=1e-12)
        h = 1e-5
        up = BatchScores(np.array([[1.0 + h]]), np.array([[[0.0]]]), np.array([1.0]), np.array([[0.0]]))
        dn = BatchScores(np.array([[1.0 - h]]), np.array([[[0.0]]]), np.array([1.0]), np.array([[0.0]]))
        numeric = (listwise_kl_loss(up, CFG)[0] - listwise_kl_loss(dn, CFG)[0]) / (2 * h)
        assert abs(grads.d_cross[0, 0] - numeric) / (abs(numeric) + 1e-8) < 1e-6

    def test_kl_direction_is_teacher_given_student(self):
        # polarized teacher against a uniform student distinguishes
        # KL(teacher || student) from KL(student || teacher)
        batch = BatchScores(
            np.array([[0.4]]), np.array([[[0.4]]]), np.array([1.0]), np.array([[0.0]])
        )
        loss, _ = listwise_kl_loss(batch, CFG)
        p_t = np.exp(np.array([1.0, 0.0]) / CFG.tau_teacher)
        p_t /= p_t.sum()
        p_s = np.array([0.5, 0.5])
        forward = float(np.sum(p_t * np.log(p_t / p_s)))
        reverse = float(np.sum(p_s * np.log(p_s / p_t)))
        assert abs(forward - reverse) > 0.1
        assert loss == pytest.approx(forward, rel=1e-12)

    def test_uniform_teacher_gradient_sign(self, rng):
        # pushing toward uniform: positive gradient where p_s > 1/(K+1)
        n, k = 3, 4
        batch = make_batch(rng, n, k)
        uniform = BatchScores(
            batch.student_cross, batch.student_cross_neg, np.full(n, 0.5), np.full((n, k), 0.5)
        )
        _, grads = listwise_kl_loss(uniform, CFG)
        rows = np.concatenate([batch.student_pos[:, None], batch.student_neg], axis=1)
        p_s = listwise_distributions(rows / 1.0, CFG.tau_student * 1.0)
        idx = np.arange(n)
        own = np.concatenate(
            [grads.d_cross[idx, idx][:, None], grads.d_cross_neg[idx, idx, :]], axis=1
        )
        assert np.all(np.sign(own) == np.sign(p_s - 1.0 / (k + 1)))


class TestInfoNCE:
    def test_single_item_degenerate(self):
        batch = BatchScores(
            np.array([[0.3]]), np.zeros((1, 1, 0)), np.array([1.0]), np.zeros((1, 0))
        )
        loss, grads = infonce_loss(batch, CFG)
        assert abs(loss) < 1e-12
        assert abs(grads.d_cross[0, 0]) < 1e-12

    def test_brute_force_n2_k1(self):
        # direct evaluation of the printed formula on hand-picked scores
        cross = np.array([[0.50, 0.10], [0.05, 0.45]])
        cross_neg = np.array([[[0.20], [0.15]], [[0.30], [0.25]]])
        tau = CFG.tau_contrastive
        expected = 0.0
        for i in range(2):
            denom = sum(math.exp(cross[i, j] / tau) for j in range(2)) + sum(
                math.exp(cross_neg[i, j, 0] / tau) for j in range(2)
            )
            expected += -math.log(math.exp(cross[i, i] / tau) / denom)
        expected /= 2
        batch = BatchScores(cross, cross_neg, np.ones(2), np.zeros((2, 1)))
        loss, grads = infonce_loss(batch, CFG)
        assert loss == pytest.approx(expected, rel=1e-12)
        h = 1e-5
        for i in range(2):
            for j in range(2):
                up, dn = cross.copy(), cross.copy()
                up[i, j] += h
                dn[i, j] -= h
                numeric = (
                    infonce_loss(BatchScores(up, cross_neg, np.ones(2), np.zeros((2, 1))), CFG)[0]
                    - infonce_loss(BatchScores(dn, cross_neg, np.ones(2), np.zeros((2, 1))), CFG)[0]
                ) / (2 * h)
                diff = abs(grads.d_cross[i, j] - numeric)
                # below FD resolution the comparison is absolute
                assert diff / (abs(numeric) + 1e-8) < 1e-6 or diff < 1e-9

    def test_row_shift_invariance(self, rng):
        batch = make_batch(rng, 3, 2, lo=-0.4, hi=0.4)
        terms = per_query_loss_terms(batch, CFG)["infonce"]
        cross = batch.student_cross.copy()
        cross_neg = batch.student_cross_neg.copy()
        cross[1, :] += 0.05
        cross_neg[1, :, :] += 0.05
        shifted = BatchScores(cross, cross_neg, batch.teacher_pos, batch.teacher_neg)
        terms2 = per_query_loss_terms(shifted, CFG)["infonce"]
        assert terms2[1] == pytest.approx(terms[1], abs=1e-9)

    def test_strictly_decreasing_in_own_positive(self, rng):
        batch = make_batch(rng, 3, 2)
        base = infonce_loss(batch, CFG)[0]
        cross = batch.student_cross.copy()
        cross[1, 1] += 0.01
        bumped = BatchScores(cross, batch.student_cross_neg, batch.teacher_pos, batch.teacher_neg)
        assert infonce_loss(bumped, CFG)[0] < base

    def test_empty_batch_rejected(self):
        with pytest.raises(DataError, match="empty batch"):
            BatchScores(np.zeros((0, 0)), np.zeros((0, 0, 3)), np.zeros(0), np.zeros((0, 3)))


class TestCombined:
    def test_zero_weight_equals_listwise(self, rng):
        cfg = LossConfig(contrastive_weight=0.0)
        batch = make_batch(rng, 4, 3)
        assert combined_loss(batch, cfg)[0] == listwise_kl_loss(batch, cfg)[0]

    def test_matched_listwise_leaves_scaled_infonce(self):
        n, k = 2, 3
        rng = np.random.default_rng(5)
        student = rng.uniform(0.0, 1.0 / 6.0, (n, k + 1))
        teacher = student * (CFG.tau_teacher / CFG.tau_student)
        cross = rng.uniform(0.0, 1.0 / 6.0, (n, n))
        np.fill_diagonal(cross, student[:, 0])
        cross_neg = rng.uniform(0.0, 1.0 / 6.0, (n, n, k))
        idx = np.arange(n)
        cross_neg[idx, idx, :] = student[:, 1:]
        batch = BatchScores(cross, cross_neg, teacher[:, 0], teacher[:, 1:])
        assert combined_loss(batch, CFG)[0] == pytest.approx(
            CFG.contrastive_weight * infonce_loss(batch, CFG)[0], abs=1e-12
        )

    def test_additivity_of_loss_and_gradients(self, rng):
        batch = make_batch(rng, 4, 3)
        total, grads = combined_loss(batch, CFG)
        kl, kl_g = listwise_kl_loss(batch, CFG)
        nce, nce_g = infonce_loss(batch, CFG)
        assert total == pytest.approx(kl + CFG.contrastive_weight * nce, abs=1e-12)
        np.testing.assert_allclose(
            grads.d_cross, kl_g.d_cross + CFG.contrastive_weight * nce_g.d_cross, atol=1e-12
        )
        np.testing.assert_allclose(
            grads.d_cross_neg,
            kl_g.d_cross_neg + CFG.contrastive_weight * nce_g.d_cross_neg,
            atol=1e-12,
        )

    def test_query_permutation_invariance(self, rng):
        n, k = 5, 3
        batch = make_batch(rng, n, k)
        perm = rng.permutation(n)
        permuted = BatchScores(
            batch.student_cross[np.ix_(perm, perm)],
            batch.student_cross_neg[np.ix_(perm, perm)],
            batch.teacher_pos[perm],
            batch.teacher_neg[perm],
        )
        assert combined_loss(permuted, CFG)[0] == pytest.approx(
            combined_loss(batch, CFG)[0], abs=1e-9
        )


class TestBackprop:
    def test_orthogonal_unit_vectors(self):
        u = np.array([[1.0, 0.0]])
        v = np.array([[0.0, 1.0]])
        grads = ScoreGrads(np.array([[1.0]]), np.zeros((1, 1, 0)))
        dq, dp, _ = backprop_scores_to_embeddings(grads, u, v, np.zeros((1, 0, 2)))
        np.testing.assert_allclose(dq, v, atol=1e-12)
        np.testing.assert_allclose(dp, u, atol=1e-12)

    def test_identical_unit_vectors_stationary(self):
        u = np.array([[0.6, 0.8]])
        grads = ScoreGrads(np.array([[1.0]]), np.zeros((1, 1, 0)))
        dq, dp, _ = backprop_scores_to_embeddings(grads, u, u.copy(), np.zeros((1, 0, 2)))
        np.testing.assert_allclose(dq, 0.0, atol=1e-12)
        np.testing.assert_allclose(dp, 0.0, atol=1e-12)

    def test_matches_finite_differences(self, rng):
        n, k, d = 3, 2, 8
        q = rng.normal(0, 1, (n, d))
        pos = rng.normal(0, 1, (n, d))
        neg = rng.normal(0, 1, (n, k, d))
        tpos = rng.uniform(0.6, 1.0, n)
        tneg = rng.uniform(0, 0.4, (n, k))

        def loss_at(q_, p_, n_):
            return combined_loss(batch_scores_from_embeddings(q_, p_, n_, tpos, tneg), CFG)[0]

        _, sg = combined_loss(batch_scores_from_embeddings(q, pos, neg, tpos, tneg), CFG)
        dq, dpos, dneg = backprop_scores_to_embeddings(sg, q, pos, neg)
        h = 1e-6
        rng2 = np.random.default_rng(1)
        for _ in range(30):
            which = int(rng2.integers(0, 3))
            arr = (q, pos, neg)[which]
            ix = tuple(int(rng2.integers(0, s)) for s in arr.shape)
            up = [q.copy(), pos.copy(), neg.copy()]
            dn = [q.copy(), pos.copy(), neg.copy()]
            up[which][ix] += h
            dn[which][ix] -= h
            numeric = (loss_at(*up) - loss_at(*dn)) / (2 * h)
            analytic = (dq, dpos, dneg)[which][ix]
            assert abs(analytic - numeric) <= max(1e-6 * abs(numeric), 1e-7)

    def test_zero_norm_rejected(self):
        grads = ScoreGrads(np.ones((1, 1)), np.zeros((1, 1, 0)))
        with pytest.raises(NumericError, match="zero-norm"):
            backprop_scores_to_embeddings(
                grads, np.zeros((1, 3)), np.ones((1, 3)), np.zeros((1, 0, 3))
            )


class TestValidation:
    def test_cosine_range_enforced(self):
        with pytest.raises(DataError, match="outside"):
            BatchScores(np.array([[1.5]]), np.zeros((1, 1, 1)), np.ones(1), np.zeros((1, 1)))

    def test_teacher_range_enforced(self):
        with pytest.raises(DataError, match="outside"):
            BatchScores(np.zeros((1, 1)), np.zeros((1, 1, 1)), np.array([1.2]), np.zeros((1, 1)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError, match="teacher shapes"):
            BatchScores(np.zeros((2, 2)), np.zeros((2, 2, 3)), np.zeros(2), np.zeros((2, 2)))

    def test_temperatures_validated(self):
        with pytest.raises(DataError, match="tau_student"):
            LossConfig(tau_student=0.0)

    def test_diagonal_accessors(self, rng):
        batch = make_batch(rng, 3, 2)
        idx = np.arange(3)
        np.testing.assert_array_equal(batch.student_pos, np.diagonal(batch.student_cross))
        np.testing.assert_array_equal(batch.student_neg, batch.student_cross_neg[idx, idx, :])

    def test_cosine_score_matrix_range(self, rng):
        a = rng.normal(0, 2, (5, 7))
        b = rng.normal(0, 0.5, (6, 7))
        m = cosine_score_matrix(a, b)
        assert np.all(m <= 1.0) and np.all(m >= -1.0)
