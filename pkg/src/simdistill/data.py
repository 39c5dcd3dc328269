"""Synthetic domain generation: labeled source and shifted unlabeled targets.

Each domain draws one Gaussian prototype per identity, adds a per-camera
offset, applies the domain's shift (rotation in a random 2-plane, scaling,
translation), and finally per-sample isotropic noise. Samples come in
tracklet groups of four: same identity, same camera.

Identity labels on unlabeled datasets exist for evaluation only. Reading
them requires an explicit :func:`label_access` context; every privileged
read is appended to an audit log so tests can prove that no adaptation code
path touches target labels.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass

import numpy as np

from .errors import LabelAccessError, ProtocolError, ShapeMismatchError, SpecError

TRACKLET_SIZE = 4

_access_reason = contextvars.ContextVar("simdistill_label_access", default=None)

SANCTIONED_REASONS = ("evaluation", "evaluation_split", "supervised_labels", "serialization")

_audit_log: list[tuple[str, str]] = []


@contextlib.contextmanager
def label_access(reason: str):
    """Grant hidden-label read access within the block and audit it."""
    if reason not in SANCTIONED_REASONS:
        raise LabelAccessError(f"unknown label access reason: {reason!r}")
    token = _access_reason.set(reason)
    try:
        yield
    finally:
        _access_reason.reset(token)


def audit_log() -> list[tuple[str, str]]:
    """Copy of (dataset_id, reason) pairs for every privileged label read."""
    return list(_audit_log)


def clear_audit_log() -> None:
    _audit_log.clear()


@dataclass(frozen=True)
class DomainShift:
    """Affine-plus-noise distortion applied to a whole domain."""

    rotation_angle: float = 0.0
    scale: float = 1.0
    translation: tuple[float, ...] | None = None
    noise_std: float = 0.0
    camera_offset_std: float = 0.0

    def validate(self, input_dim: int) -> None:
        if self.scale <= 0:
            raise SpecError(f"shift scale must be positive, got {self.scale}")
        if self.noise_std < 0 or self.camera_offset_std < 0:
            raise SpecError("noise_std and camera_offset_std must be nonnegative")
        if self.translation is not None and len(self.translation) != input_dim:
            raise SpecError(
                f"translation has {len(self.translation)} entries for input_dim {input_dim}"
            )


IDENTITY_SHIFT = DomainShift()


@dataclass(frozen=True)
class DomainSpec:
    """``seed`` drives the domain-level randomness (camera offsets, rotation
    plane); ``identity_seed`` (defaulting to ``seed``) drives identity
    prototypes and sample noise. Two specs sharing ``seed`` but not
    ``identity_seed`` describe the same domain populated with disjoint
    people, which is how open-set test splits are generated.

    Identity prototypes are drawn in a ``latent_dim``-dimensional subspace
    whose basis comes from ``basis_seed``; domains meant to share underlying
    identity structure (source and its shifted targets) share a basis_seed.
    Sample noise and camera offsets are full-dimensional, so discriminative
    features must find the subspace."""

    domain_id: str
    num_identities: int
    cameras: int
    samples_per_identity_per_camera: int
    input_dim: int
    shift: DomainShift = IDENTITY_SHIFT
    seed: int = 0
    identity_seed: int | None = None
    latent_dim: int | None = None
    basis_seed: int = 0

    @property
    def effective_latent_dim(self) -> int:
        if self.latent_dim is not None:
            return self.latent_dim
        return max(2, self.input_dim // 4)

    def validate(self) -> None:
        if self.num_identities < 2:
            raise SpecError(f"need at least 2 identities, got {self.num_identities}")
        if self.cameras < 1:
            raise SpecError("need at least 1 camera")
        if self.samples_per_identity_per_camera < 1:
            raise SpecError("need at least 1 sample per identity per camera")
        # Tracklet groups never span cameras, so the per-camera count must
        # divide into whole groups (stronger than requiring the per-identity
        # total to be a multiple of 4).
        if self.samples_per_identity_per_camera % TRACKLET_SIZE != 0:
            raise SpecError(
                "samples_per_identity_per_camera must be a multiple of "
                f"{TRACKLET_SIZE}, got {self.samples_per_identity_per_camera}"
            )
        if self.input_dim < 2:
            raise SpecError("input_dim must be at least 2")
        if not 1 <= self.effective_latent_dim <= self.input_dim:
            raise SpecError(
                f"latent_dim {self.effective_latent_dim} outside [1, {self.input_dim}]"
            )
        if self.seed < 0:
            raise SpecError("seed must be unsigned")
        self.shift.validate(self.input_dim)


class DomainDataset:
    """Immutable sample collection with identity/camera/tracklet tags.

    When ``labeled`` is False the identity labels are hidden: the
    ``identities`` property raises unless a sanctioned :func:`label_access`
    context is open, and each such read is audited.
    """

    def __init__(self, domain_id, inputs, identities, cameras, tracklet_groups, labeled):
        inputs = np.ascontiguousarray(inputs, dtype=np.float64)
        identities = np.asarray(identities, dtype=np.int64)
        cameras = np.asarray(cameras, dtype=np.int64)
        tracklet_groups = np.asarray(tracklet_groups, dtype=np.int64)
        m = inputs.shape[0]
        if not (len(identities) == len(cameras) == len(tracklet_groups) == m):
            raise SpecError("label arrays must match the number of samples")
        self.domain_id = str(domain_id)
        self.inputs = inputs
        self.cameras = cameras
        self.tracklet_groups = tracklet_groups
        self.labeled = bool(labeled)
        self._identities = identities
        for arr in (self.inputs, self.cameras, self.tracklet_groups, self._identities):
            arr.setflags(write=False)

    # -- size ------------------------------------------------------------------
    @property
    def num_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def __len__(self) -> int:
        return self.num_samples

    # -- labels ------------------------------------------------------------------
    @property
    def identities(self) -> np.ndarray:
        if not self.labeled:
            reason = _access_reason.get()
            if reason is None:
                raise LabelAccessError(
                    f"identity labels of unlabeled dataset {self.domain_id!r} "
                    "are evaluation-only"
                )
            _audit_log.append((self.domain_id, reason))
        return self._identities

    @property
    def num_identities(self) -> int:
        return int(np.unique(self._identities).size)

    def with_labels_revealed(self) -> "DomainDataset":
        """Labeled view for supervised upper-bound training; audited."""
        with label_access("supervised_labels"):
            ids = self.identities
        return DomainDataset(
            self.domain_id, self.inputs, ids, self.cameras, self.tracklet_groups, True
        )

    def subset(self, indices) -> "DomainDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return DomainDataset(
            self.domain_id,
            self.inputs[indices],
            self._identities[indices],
            self.cameras[indices],
            self.tracklet_groups[indices],
            self.labeled,
        )


def _rotation_matrix(dim: int, angle: float, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotation by ``angle`` in the 2-plane spanned by orthonormal u, v."""
    c, s = np.cos(angle), np.sin(angle)
    return (
        np.eye(dim)
        + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
        + s * (np.outer(u, v) - np.outer(v, u))
    )


def latent_basis(spec: DomainSpec) -> np.ndarray:
    """Orthonormal latent_dim x input_dim basis of the identity subspace."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.basis_seed, 0xBA515]))
    raw = rng.normal(size=(spec.effective_latent_dim, spec.input_dim))
    q, _ = np.linalg.qr(raw.T)
    return np.ascontiguousarray(q.T)


def domain_transform(spec: DomainSpec):
    """The domain-level distortion: (camera offsets, rotation matrix,
    translation vector). A function of ``seed``, ``basis_seed`` and the
    shift alone.

    The rotation plane is seeded per domain: one direction inside the
    identity subspace, one orthogonal to it, so the angle directly controls
    how much identity-discriminative variance leaves the subspace.
    """
    dim = spec.input_dim
    basis = latent_basis(spec)
    rng = np.random.default_rng(spec.seed)
    cam_offsets = rng.normal(0.0, 1.0, size=(spec.cameras, dim)) * spec.shift.camera_offset_std
    coeff = rng.normal(size=basis.shape[0])
    u = coeff @ basis
    u /= np.linalg.norm(u)
    v = rng.normal(size=dim)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    rotation = _rotation_matrix(dim, spec.shift.rotation_angle, u, v)
    translation = (
        np.zeros(dim)
        if spec.shift.translation is None
        else np.asarray(spec.shift.translation, dtype=np.float64)
    )
    return cam_offsets, rotation, translation


def generate_domain(spec: DomainSpec) -> DomainDataset:
    """Deterministically generate one domain dataset from its spec.

    Labeled status: source-style domains are created labeled; call sites
    generating targets pass through :func:`as_unlabeled`.
    """
    spec.validate()
    dim = spec.input_dim
    basis = latent_basis(spec)
    cam_offsets, rotation, translation = domain_transform(spec)
    ident_seed = spec.seed if spec.identity_seed is None else spec.identity_seed
    rng = np.random.default_rng(np.random.SeedSequence([ident_seed, 0x1D5EED]))
    protos = rng.normal(0.0, 1.0, size=(spec.num_identities, basis.shape[0])) @ basis

    sppc = spec.samples_per_identity_per_camera
    rows, ids, cams, groups = [], [], [], []
    group_counter = 0
    for ident in range(spec.num_identities):
        for cam in range(spec.cameras):
            base = protos[ident] + cam_offsets[cam]
            for _ in range(sppc // TRACKLET_SIZE):
                for _ in range(TRACKLET_SIZE):
                    rows.append(base)
                    ids.append(ident)
                    cams.append(cam)
                    groups.append(group_counter)
                group_counter += 1
    x = np.asarray(rows)
    x = spec.shift.scale * (x @ rotation.T) + translation
    x = x + rng.normal(0.0, 1.0, size=x.shape) * spec.shift.noise_std
    return DomainDataset(spec.domain_id, x, ids, cams, groups, labeled=True)


def as_unlabeled(dataset: DomainDataset) -> DomainDataset:
    return DomainDataset(
        dataset.domain_id,
        dataset.inputs,
        dataset._identities,
        dataset.cameras,
        dataset.tracklet_groups,
        labeled=False,
    )


def blend_targets(targets: list[DomainDataset]) -> DomainDataset:
    """Concatenate target datasets with globally unique identity labels.

    Identities are disjoint across domains (open-set), so blending must not
    alias them; camera and tracklet-group ids are offset the same way. The
    blend is unlabeled iff any input is.
    """
    if not targets:
        raise SpecError("blend_targets needs at least one dataset")
    dim = targets[0].input_dim
    for ds in targets[1:]:
        if ds.input_dim != dim:
            raise ShapeMismatchError(
                f"blend: input_dim {ds.input_dim} of {ds.domain_id!r} differs from {dim}"
            )
    inputs, ids, cams, groups = [], [], [], []
    id_base = cam_base = group_base = 0
    labeled = all(ds.labeled for ds in targets)
    for ds in targets:
        inputs.append(ds.inputs)
        ids.append(ds._identities + id_base)
        cams.append(ds.cameras + cam_base)
        groups.append(ds.tracklet_groups + group_base)
        id_base += int(ds._identities.max()) + 1
        cam_base += int(ds.cameras.max()) + 1
        group_base += int(ds.tracklet_groups.max()) + 1
    return DomainDataset(
        "blend",
        np.concatenate(inputs),
        np.concatenate(ids),
        np.concatenate(cams),
        np.concatenate(groups),
        labeled,
    )


def _groups_by_identity(dataset: DomainDataset):
    """identity -> list of (group_id, camera, sample indices)."""
    out: dict[int, list[tuple[int, int, np.ndarray]]] = {}
    group_ids = dataset.tracklet_groups
    for group in np.unique(group_ids):
        idx = np.nonzero(group_ids == group)[0]
        ident = int(dataset._identities[idx[0]])
        cam = int(dataset.cameras[idx[0]])
        out.setdefault(ident, []).append((int(group), cam, idx))
    return out


def split_query_gallery(dataset: DomainDataset, query_fraction: float, seed: int):
    """Split whole tracklet groups into query and gallery sets.

    Per identity, one group from each of two distinct cameras is reserved
    for the gallery, which guarantees every query sample a cross-camera
    match. Deterministic given the seed.
    """
    if not 0.0 < query_fraction < 1.0:
        raise SpecError(f"query_fraction must be in (0, 1), got {query_fraction}")
    with label_access("evaluation_split"):
        by_identity = _groups_by_identity(dataset)
    rng = np.random.default_rng(seed)
    query_idx, gallery_idx = [], []
    for ident in sorted(by_identity):
        entries = by_identity[ident]
        cams = {cam for _, cam, _ in entries}
        if len(cams) < 2:
            raise ProtocolError(
                f"identity {ident} appears under a single camera; "
                "cross-camera evaluation is impossible"
            )
        order = rng.permutation(len(entries))
        reserved: list[int] = []
        seen_cams: set[int] = set()
        for pos in order:
            cam = entries[pos][1]
            if cam not in seen_cams:
                reserved.append(pos)
                seen_cams.add(cam)
            if len(reserved) == 2:
                break
        remaining = [pos for pos in order if pos not in reserved]
        n_query = int(round(query_fraction * len(entries)))
        n_query = min(n_query, len(remaining))
        for k, pos in enumerate(remaining):
            (query_idx if k < n_query else gallery_idx).extend(entries[pos][2])
        for pos in reserved:
            gallery_idx.extend(entries[pos][2])
    query = dataset.subset(np.sort(np.asarray(query_idx, dtype=np.int64)))
    gallery = dataset.subset(np.sort(np.asarray(gallery_idx, dtype=np.int64)))
    return query, gallery


# -- serialization ---------------------------------------------------------------

FORMAT_TAG = "simdistill-domain v1"


def dumps_dataset(dataset: DomainDataset) -> str:
    """Column-oriented text form for reproducibility audits.

    Header carries counts and dims; every sample line is
    ``domain_id identity camera group v0 v1 ...``. Hidden labels are
    written too (the format exists for audits), flagged by ``labeled``.
    """
    with label_access("serialization"):
        ids = dataset.identities
    lines = [
        FORMAT_TAG,
        f"domain_id={dataset.domain_id} labeled={int(dataset.labeled)} "
        f"samples={dataset.num_samples} dim={dataset.input_dim}",
    ]
    for i in range(dataset.num_samples):
        values = " ".join(repr(float(v)) for v in dataset.inputs[i])
        lines.append(
            f"{dataset.domain_id} {ids[i]} {dataset.cameras[i]} "
            f"{dataset.tracklet_groups[i]} {values}"
        )
    return "\n".join(lines) + "\n"


def loads_dataset(text: str) -> DomainDataset:
    lines = text.strip("\n").split("\n")
    if not lines or lines[0] != FORMAT_TAG:
        raise SpecError(f"not a {FORMAT_TAG!r} document")
    header = dict(part.split("=", 1) for part in lines[1].split())
    m, dim = int(header["samples"]), int(header["dim"])
    if len(lines) - 2 != m:
        raise SpecError(f"header says {m} samples, found {len(lines) - 2}")
    inputs = np.empty((m, dim))
    ids = np.empty(m, dtype=np.int64)
    cams = np.empty(m, dtype=np.int64)
    groups = np.empty(m, dtype=np.int64)
    for i, line in enumerate(lines[2:]):
        parts = line.split()
        if len(parts) != 4 + dim:
            raise SpecError(f"sample line {i} has {len(parts)} fields, expected {4 + dim}")
        ids[i], cams[i], groups[i] = int(parts[1]), int(parts[2]), int(parts[3])
        inputs[i] = [float(v) for v in parts[4 : 4 + dim]]
    return DomainDataset(
        header["domain_id"], inputs, ids, cams, groups, labeled=bool(int(header["labeled"]))
    )


def save_dataset(dataset: DomainDataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_dataset(dataset))


def load_dataset(path) -> DomainDataset:
    with open(path) as fh:
        return loads_dataset(fh.read())
