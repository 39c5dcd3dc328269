import math

import numpy as np
import pytest

import simdistill.tensor as T
from simdistill.errors import ConfigError, LabelError, MiningError, ShapeMismatchError
from simdistill.losses import (
    batch_hard_triplet,
    cross_entropy_loss,
    default_bandwidths,
    kd_similarity_loss,
    mmd_loss,
    self_similarity,
)
from simdistill.tensor import Tape, Tensor2D, finite_difference_check


def t(values, requires_grad=False):
    return Tensor2D(values, requires_grad=requires_grad)


# -- independent oracles -------------------------------------------------------


def ce_oracle(logits, labels):
    total = 0.0
    for row, label in zip(logits, labels):
        m = max(row)
        z = sum(math.exp(v - m) for v in row)
        total += -(row[label] - m - math.log(z))
    return total / len(labels)


def triplet_oracle(feats, ids, margin):
    feats = np.asarray(feats, dtype=float)
    n = len(ids)
    total = 0.0
    for a in range(n):
        d_pos = 0.0
        for p in range(n):
            if p != a and ids[p] == ids[a]:
                d_pos = max(d_pos, float(np.linalg.norm(feats[a] - feats[p])))
        d_neg = math.inf
        for q in range(n):
            if ids[q] != ids[a]:
                d_neg = min(d_neg, float(np.linalg.norm(feats[a] - feats[q])))
        total += max(0.0, margin + d_pos - d_neg)
    return total / n


def mmd_oracle(x, y, bandwidths):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    m, n = len(x), len(y)

    def k(u, v):
        d2 = float(((u - v) ** 2).sum())
        return sum(math.exp(-d2 / bw) for bw in bandwidths)

    xx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j)
    yy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j)
    if m == n:
        xy = sum(k(x[i], y[j]) for i in range(m) for j in range(m) if i != j)
        return xx / (m * (m - 1)) + yy / (n * (n - 1)) - 2.0 * xy / (m * (m - 1))
    xy = sum(k(x[i], y[j]) for i in range(m) for j in range(n))
    return xx / (m * (m - 1)) + yy / (n * (n - 1)) - 2.0 * xy / (m * n)


# -- cross entropy -------------------------------------------------------------


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy_loss(t(np.zeros((3, 4))), [0, 1, 3])
        assert abs(loss.item() - math.log(4.0)) < 1e-12

    def test_saturated_true_class(self):
        logits = np.zeros((2, 5))
        logits[0, 2] = 20.0
        logits[1, 0] = 20.0
        loss = cross_entropy_loss(t(logits), [2, 0])
        assert loss.item() < 1e-7

    def test_two_class_hand_case(self):
        loss = cross_entropy_loss(t([[1.0, 2.0]]), [0])
        expected = ce_oracle([[1.0, 2.0]], [0])
        assert abs(expected - math.log(1.0 + math.e)) < 1e-12
        assert abs(loss.item() - expected) < 1e-12

    def test_random_matches_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(7, 5))
        labels = rng.integers(0, 5, size=7)
        loss = cross_entropy_loss(t(logits), labels)
        assert abs(loss.item() - ce_oracle(logits.tolist(), labels.tolist())) < 1e-12

    def test_out_of_range_label(self):
        with pytest.raises(LabelError):
            cross_entropy_loss(t(np.zeros((2, 3))), [0, 3])


# -- batch-hard triplet ----------------------------------------------------------


class TestBatchHardTriplet:
    def test_separated_clusters_zero(self):
        feats = [[0.0, 0.0], [0.0, 0.0], [5.0, 0.0], [5.0, 0.0]]
        loss = batch_hard_triplet(t(feats), [0, 0, 1, 1], margin=0.3)
        assert loss.item() == 0.0

    def test_two_pair_hand_case(self):
        loss = batch_hard_triplet(t([[0.0], [0.0], [1.0], [1.0]]), list("aabb"), margin=0.3)
        assert loss.item() == 0.0

    def test_three_point_hand_case(self):
        feats = [[0.0], [0.5], [0.6]]
        loss = batch_hard_triplet(t(feats), ["a", "a", "b"], margin=0.3)
        expected = triplet_oracle(feats, ["a", "a", "b"], 0.3)
        assert abs(expected - 1.1 / 3.0) < 1e-12
        assert abs(loss.item() - expected) < 1e-12

    def test_random_batches_match_oracle_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = int(rng.integers(4, 17))
            feats = rng.normal(size=(n, 5))
            ids = rng.integers(0, 4, size=n)
            if np.unique(ids).size < 2:
                continue
            loss = batch_hard_triplet(t(feats), ids, margin=0.3)
            assert abs(loss.item() - triplet_oracle(feats, ids, 0.3)) < 1e-12

    def test_single_identity_rejected(self):
        with pytest.raises(MiningError):
            batch_hard_triplet(t([[0.0], [1.0]]), ["a", "a"], margin=0.3)


# -- mmd -------------------------------------------------------------------------


class TestMmd:
    def test_identical_samples_zero(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 3))
        loss = mmd_loss(t(x), t(x.copy()), [1.0, 2.0])
        assert abs(loss.item()) < 1e-9

    def test_argument_swap_symmetric(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)) + 1.0
        a = mmd_loss(t(x), t(y), [0.7, 2.0]).item()
        b = mmd_loss(t(y), t(x), [0.7, 2.0]).item()
        assert abs(a - b) < 1e-12

    def test_two_by_two_hand_expansion(self):
        x = [[0.0, 0.0], [1.0, 0.0]]
        y = [[0.5, 0.5], [2.0, -1.0]]
        loss = mmd_loss(t(x), t(y), [1.5])
        assert abs(loss.item() - mmd_oracle(x, y, [1.5])) < 1e-12

    def test_unequal_sizes_match_oracle(self):
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(7, 3))
        loss = mmd_loss(t(x), t(y), [0.5, 1.0, 4.0])
        assert abs(loss.item() - mmd_oracle(x, y, [0.5, 1.0, 4.0])) < 1e-12

    def test_empty_bandwidths_rejected(self):
        with pytest.raises(ConfigError):
            mmd_loss(t(np.zeros((2, 2))), t(np.ones((2, 2))), [])

    def test_default_bandwidths_scale_with_median(self):
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        bws = default_bandwidths(x, y)
        assert len(bws) == 5
        assert all(b > 0 for b in bws)
        assert abs(bws[2] / bws[0] - 4.0) < 1e-12  # scales 0.5 .. 2.0

    def test_shifted_distributions_positive(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(16, 4))
        y = rng.normal(size=(16, 4)) + 3.0
        assert mmd_loss(t(x), t(y), default_bandwidths(x, y)).item() > 0.05


# -- kd similarity ----------------------------------------------------------------


class TestKdSimilarityLoss:
    def test_identical_representations_zero(self):
        rng = np.random.default_rng(7)
        f = rng.normal(size=(6, 4))
        assert kd_similarity_loss(t(f), t(f.copy())).item() <= 1e-12

    def test_orthonormal_vs_duplicate_rows(self):
        student = t([[1.0, 0.0], [0.0, 1.0]])
        teacher = t([[1.0, 0.0], [1.0, 0.0]])
        loss = kd_similarity_loss(student, teacher)
        assert abs(loss.item() - math.sqrt(2.0)) < 1e-12

    def test_dimension_mismatch_allowed(self):
        # orthogonal rows on both sides: affinity matrices are both identity
        student = t(np.eye(3, 8))
        teacher = t(2.0 * np.eye(3, 64))
        assert kd_similarity_loss(student, teacher).item() < 1e-9

    def test_batch_size_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            kd_similarity_loss(t(np.eye(3)), t(np.eye(4)))

    def test_affinity_vs_one_minus_affinity_invariance(self):
        rng = np.random.default_rng(8)
        s, te = rng.normal(size=(5, 3)), rng.normal(size=(5, 6))
        direct = kd_similarity_loss(t(s), t(te)).item()
        ones = t(np.ones((5, 5)))
        a_s = T.sub(ones, self_similarity(t(s)))
        a_t = T.sub(ones, self_similarity(t(te)))
        flipped = T.frobenius_norm_diff(a_s, a_t).item()
        assert abs(direct - flipped) < 1e-12

    def test_row_rescaling_invariance(self):
        rng = np.random.default_rng(9)
        s, te = rng.normal(size=(6, 4)), rng.normal(size=(6, 5))
        base = kd_similarity_loss(t(s), t(te)).item()
        for _ in range(5):
            cs = rng.uniform(0.1, 10.0, size=(6, 1))
            ct = rng.uniform(0.1, 10.0, size=(6, 1))
            scaled = kd_similarity_loss(t(s * cs), t(te * ct)).item()
            assert abs(scaled - base) < 1e-9

    def test_teacher_receives_no_gradient(self):
        rng = np.random.default_rng(10)
        s = t(rng.normal(size=(4, 3)), requires_grad=True)
        te = t(rng.normal(size=(4, 5)), requires_grad=True)
        te.zero_grad()
        with Tape() as tape:
            loss = kd_similarity_loss(s, te)
        tape.backward(loss)
        assert np.abs(te.grad).sum() == 0.0
        assert np.abs(s.grad).sum() > 0.0


# -- gradients against finite differences ------------------------------------------


class TestLossGradients:
    def test_cross_entropy_fd(self):
        rng = np.random.default_rng(11)
        logits = t(rng.normal(size=(6, 4)), requires_grad=True)
        labels = rng.integers(0, 4, size=6)
        err = finite_difference_check(
            lambda: cross_entropy_loss(logits, labels), [logits], step=1e-5
        )
        assert err < 1e-5

    def test_triplet_fd(self):
        rng = np.random.default_rng(12)
        feats = t(rng.normal(size=(6, 4)), requires_grad=True)
        ids = np.array([0, 0, 1, 1, 2, 2])
        err = finite_difference_check(
            lambda: batch_hard_triplet(feats, ids, margin=0.3), [feats], step=1e-5
        )
        assert err < 1e-5

    def test_mmd_fd(self):
        rng = np.random.default_rng(13)
        s = t(rng.normal(size=(5, 3)), requires_grad=True)
        te = t(rng.normal(size=(5, 3)) + 0.5, requires_grad=True)
        err = finite_difference_check(
            lambda: mmd_loss(s, te, [0.8, 2.0]), [s, te], step=1e-5
        )
        assert err < 1e-5

    def test_kd_fd(self):
        rng = np.random.default_rng(14)
        s = t(rng.normal(size=(5, 3)), requires_grad=True)
        te = t(rng.normal(size=(5, 7)))
        err = finite_difference_check(
            lambda: kd_similarity_loss(s, te), [s], step=1e-5
        )
        assert err < 1e-5
