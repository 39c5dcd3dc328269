"""Trainable objectives: supervised metric-learning losses, the reference
distribution-alignment loss (multi-kernel MMD), and the similarity-matrix
distillation loss."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, LabelError, MiningError, ShapeMismatchError
from .tensor import Tensor2D

DEFAULT_TRIPLET_MARGIN = 0.3
MMD_BANDWIDTH_SCALES = (0.5, 1.0, 2.0, 4.0, 8.0)


def cross_entropy_loss(logits: Tensor2D, labels) -> Tensor2D:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.cols):
        bad = labels[(labels < 0) | (labels >= logits.cols)][0]
        raise LabelError(f"label {bad} outside [0, {logits.cols})")
    return T.softmax_cross_entropy(logits, labels)


def batch_hard_triplet(
    feats: Tensor2D, identities, margin: float = DEFAULT_TRIPLET_MARGIN
) -> Tensor2D:
    """Batch-hard triplet loss on Euclidean distances over raw features.

    Per anchor: hardest positive is the farthest same-identity sample,
    hardest negative the closest other-identity sample; anchors without a
    positive use distance 0. Loss is the mean hinge over all anchors.
    """
    ids = np.asarray(identities)
    n = feats.rows
    if ids.shape != (n,):
        raise ShapeMismatchError(f"{ids.shape} identities for {n} feature rows")
    if np.unique(ids).size < 2:
        raise MiningError("batch-hard mining needs at least 2 identities in the batch")

    same = ids[:, None] == ids[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same

    dists = T.sqrt(T.pairwise_sq_distances(feats, feats))
    d_pos = T.row_extremum(dists, pos_mask, use_max=True)
    d_neg = T.row_extremum(dists, neg_mask, use_max=False)
    hinge = T.relu(T.add_const(T.sub(d_pos, d_neg), margin))
    return T.mean_all(hinge)


def median_sq_distance(*feature_arrays) -> float:
    """Median pairwise squared distance of the stacked rows.

    Bandwidth base for the multi-kernel MMD; computed outside the tape so no
    gradient flows through it.
    """
    joined = np.concatenate([np.asarray(a, dtype=np.float64) for a in feature_arrays])
    sq = np.einsum("ij,ij->i", joined, joined)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (joined @ joined.T)
    off = d2[~np.eye(len(joined), dtype=bool)]
    med = float(np.median(np.maximum(off, 0.0)))
    return med if med > 0.0 else 1.0


def default_bandwidths(source_values, target_values) -> list[float]:
    base = median_sq_distance(source_values, target_values)
    return [s * base for s in MMD_BANDWIDTH_SCALES]


def mmd_loss(source_feats: Tensor2D, target_feats: Tensor2D, bandwidths) -> Tensor2D:
    """Multi-kernel squared MMD with Gaussian kernels exp(-d^2 / bw).

    Uses the unbiased off-diagonal estimator. With equally sized batches the
    cross term also drops the matched-index diagonal, so feeding the same
    samples twice gives exactly zero.
    """
    bandwidths = list(bandwidths)
    if not bandwidths:
        raise ConfigError("mmd_loss needs at least one bandwidth")
    if any(bw <= 0 for bw in bandwidths):
        raise ConfigError("mmd bandwidths must be positive")
    if source_feats.cols != target_feats.cols:
        raise ShapeMismatchError(
            f"mmd: feature dims differ, {source_feats.shape} vs {target_feats.shape}"
        )
    m, n = source_feats.rows, target_feats.rows
    if m < 2 or n < 2:
        raise ShapeMismatchError("mmd needs at least 2 samples per side")

    d_ss = T.pairwise_sq_distances(source_feats, source_feats)
    d_tt = T.pairwise_sq_distances(target_feats, target_feats)
    d_st = T.pairwise_sq_distances(source_feats, target_feats)

    off_m = Tensor2D(1.0 - np.eye(m))
    off_n = Tensor2D(1.0 - np.eye(n))

    total = None
    for bw in bandwidths:
        k_ss = T.sum_all(T.mul(T.exp(T.scale(d_ss, -1.0 / bw)), off_m))
        k_tt = T.sum_all(T.mul(T.exp(T.scale(d_tt, -1.0 / bw)), off_n))
        if m == n:
            k_st = T.sum_all(T.mul(T.exp(T.scale(d_st, -1.0 / bw)), off_m))
            cross = T.scale(k_st, -2.0 / (m * (m - 1)))
        else:
            k_st = T.sum_all(T.exp(T.scale(d_st, -1.0 / bw)))
            cross = T.scale(k_st, -2.0 / (m * n))
        term = T.add(
            T.add(T.scale(k_ss, 1.0 / (m * (m - 1))), T.scale(k_tt, 1.0 / (n * (n - 1)))),
            cross,
        )
        total = term if total is None else T.add(total, term)
    return total


def self_similarity(feats: Tensor2D, epsilon: float = 1e-12) -> Tensor2D:
    """Cosine affinity matrix of the batch: gram of L2-normalized rows."""
    return T.gram_matrix(T.l2_normalize_rows(feats, epsilon))


def kd_similarity_loss(student_feats: Tensor2D, teacher_feats: Tensor2D) -> Tensor2D:
    """Frobenius distance between student and teacher cosine self-similarity
    matrices. The teacher side is computed off-tape, so it is a constant and
    no gradient reaches teacher parameters. Feature dimensions may differ;
    both affinity matrices are batch x batch."""
    if student_feats.rows != teacher_feats.rows:
        raise ShapeMismatchError(
            f"kd loss: batch sizes differ, {student_feats.rows} vs {teacher_feats.rows}"
        )
    a_stu = self_similarity(student_feats)
    with T.pause_recording():
        a_tea = self_similarity(teacher_feats)
    return T.frobenius_norm_diff(a_stu, a_tea)
