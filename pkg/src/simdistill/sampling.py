"""Identity-grouped mini-batch construction.

Batches hold P groups of K consecutive samples. On labeled data a group is
one identity (for K=4, one whole tracklet group of that identity); on
unlabeled data groups are tracklet groups directly, since the tracklet
invariant (constant identity within a group) is the only identity structure
an adaptation method may rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TRACKLET_SIZE, DomainDataset, _access_reason, _audit_log
from .errors import LabelAccessError, SamplingError

SOURCE_P = 8
KD_P = 16
DEFAULT_K = 4


@dataclass
class Batch:
    """P groups of K consecutive samples drawn from one dataset."""

    inputs: np.ndarray
    cameras: np.ndarray
    domain_id: str
    P: int
    K: int
    labeled: bool
    indices: np.ndarray
    _identities: np.ndarray = field(repr=False, default=None)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def identities(self) -> np.ndarray:
        if not self.labeled:
            reason = _access_reason.get()
            if reason is None:
                raise LabelAccessError(
                    f"identity labels of a batch from unlabeled {self.domain_id!r} "
                    "are evaluation-only"
                )
            _audit_log.append((self.domain_id, reason))
        return self._identities

    def group_slices(self):
        return [slice(g * self.K, (g + 1) * self.K) for g in range(self.P)]


def _group_keys(dataset: DomainDataset):
    """Sampling keys: identities when labeled, tracklet groups otherwise."""
    if dataset.labeled:
        keys = dataset.identities
    else:
        keys = dataset.tracklet_groups
    uniq = np.unique(keys)
    return keys, uniq


def _build_batch(dataset: DomainDataset, chosen_keys, keys, K, rng) -> Batch:
    picked = []
    for key in chosen_keys:
        idx = np.nonzero(keys == key)[0]
        if dataset.labeled and K == DEFAULT_K:
            # one whole tracklet group of this identity
            groups = np.unique(dataset.tracklet_groups[idx])
            group = groups[rng.integers(0, len(groups))]
            members = np.nonzero(dataset.tracklet_groups == group)[0]
        elif len(idx) >= K:
            members = rng.choice(idx, size=K, replace=False)
        else:
            raise SamplingError(
                f"key {key} has {len(idx)} samples, need K={K}"
            )
        if len(members) != K:
            raise SamplingError(
                f"group for key {key} has {len(members)} samples, need K={K}"
            )
        picked.append(np.sort(members))
    indices = np.concatenate(picked)
    return Batch(
        inputs=dataset.inputs[indices],
        cameras=dataset.cameras[indices],
        domain_id=dataset.domain_id,
        P=len(chosen_keys),
        K=K,
        labeled=dataset.labeled,
        indices=indices,
        _identities=dataset._identities[indices],
    )


def pk_sample(dataset: DomainDataset, P: int, K: int = DEFAULT_K, rng=None) -> Batch:
    """Draw one batch of P identity groups x K samples without replacement."""
    if rng is None:
        raise SamplingError("pk_sample needs a seeded generator")
    if P < 2:
        raise SamplingError(f"P={P} rejected: batches must contain >= 2 identities")
    if K < 1:
        raise SamplingError(f"K={K} must be positive")
    if not dataset.labeled and K > TRACKLET_SIZE:
        raise SamplingError(f"K={K} exceeds the tracklet size on unlabeled data")
    keys, uniq = _group_keys(dataset)
    if len(uniq) < P:
        raise SamplingError(
            f"dataset {dataset.domain_id!r} has {len(uniq)} identity groups, need P={P}"
        )
    chosen = rng.choice(uniq, size=P, replace=False)
    return _build_batch(dataset, chosen, keys, K, rng)


def paired_batch(source: DomainDataset, target: DomainDataset, rng):
    """One 32-sample source batch plus one 32-sample target batch."""
    return (
        pk_sample(source, SOURCE_P, DEFAULT_K, rng),
        pk_sample(target, SOURCE_P, DEFAULT_K, rng),
    )


class PKSampler:
    """Epoch-wise sampler: keys partitioned without replacement, reshuffled
    every epoch; the trailing partial batch is dropped."""

    def __init__(self, dataset: DomainDataset, P: int, K: int = DEFAULT_K):
        if P < 2:
            raise SamplingError(f"P={P} rejected: batches must contain >= 2 identities")
        self.dataset = dataset
        self.P = P
        self.K = K
        self._keys, self._uniq = _group_keys(dataset)
        if len(self._uniq) < P:
            raise SamplingError(
                f"dataset {dataset.domain_id!r} has {len(self._uniq)} identity "
                f"groups, need P={P}"
            )

    def batches_per_epoch(self) -> int:
        return len(self._uniq) // self.P

    def epoch(self, rng):
        order = rng.permutation(self._uniq)
        for start in range(0, len(order) - self.P + 1, self.P):
            yield _build_batch(
                self.dataset, order[start : start + self.P], self._keys, self.K, rng
            )
