"""Retrieval metrics (mAP, CMC) under the cross-camera protocol, feature
extraction, and model complexity accounting.

Per-query average precision is accumulated with plain Python floats in rank
order, which keeps results bit-comparable with a loop-based oracle; only the
affinity matrix and the ranking use vectorized numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import DomainDataset, label_access
from .errors import ProtocolError, ShapeMismatchError
from .models import BackboneModel
from .tensor import Tensor2D


@dataclass
class FeatureBatch:
    """L2-normalized feature rows plus the metadata evaluation needs."""

    feats: Tensor2D
    identities: np.ndarray | None
    cameras: np.ndarray | None
    domain_id: str


@dataclass
class Metrics:
    mAP: float
    cmc: np.ndarray
    num_queries: int

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])


@dataclass
class ComplexityReport:
    num_parameters: int
    flops_per_sample: int


def extract_features(model: BackboneModel, dataset: DomainDataset) -> FeatureBatch:
    """Embed every sample and L2-normalize; nothing is recorded on a tape."""
    if dataset.input_dim != model.input_dim:
        raise ShapeMismatchError(
            f"model expects input_dim {model.input_dim}, dataset has {dataset.input_dim}"
        )
    with T.pause_recording():
        feats = T.l2_normalize_rows(model.embed(dataset.inputs))
    return FeatureBatch(feats, None, dataset.cameras.copy(), dataset.domain_id)


def labeled_features(model: BackboneModel, dataset: DomainDataset) -> FeatureBatch:
    """Features plus identity labels, read under the evaluation sanction."""
    fb = extract_features(model, dataset)
    with label_access("evaluation"):
        fb.identities = dataset.identities.copy()
    return fb


def cmc_map(query: FeatureBatch, gallery: FeatureBatch, protocol: str = "cross_camera") -> Metrics:
    """Rank the gallery by cosine affinity per query and score mAP / CMC.

    Under ``cross_camera``, gallery entries sharing the query's identity and
    camera are excluded from that query's ranking. Ties break by original
    gallery index (stable sort).
    """
    if protocol not in ("cross_camera", "all"):
        raise ProtocolError(f"unknown protocol {protocol!r}")
    if query.identities is None or gallery.identities is None:
        raise ProtocolError("cmc_map needs identity labels on both sides")
    q_feats, g_feats = query.feats.values, gallery.feats.values
    q_ids, g_ids = np.asarray(query.identities), np.asarray(gallery.identities)
    q_cams, g_cams = np.asarray(query.cameras), np.asarray(gallery.cameras)
    num_q, num_g = len(q_ids), len(g_ids)
    if num_q < 1:
        raise ProtocolError("need at least one query")

    affinity = q_feats @ g_feats.T
    order = np.argsort(-affinity, axis=1, kind="stable")

    ap_values: list[float] = []
    match_ranks: list[np.ndarray] = []
    max_len = 0
    for qi in range(num_q):
        ranked = order[qi]
        if protocol == "cross_camera":
            drop = (g_ids[ranked] == q_ids[qi]) & (g_cams[ranked] == q_cams[qi])
            ranked = ranked[~drop]
        rel = g_ids[ranked] == q_ids[qi]
        if not rel.any():
            raise ProtocolError(
                f"query {qi} (identity {q_ids[qi]}, camera {q_cams[qi]}) has no "
                "valid gallery match under the protocol"
            )
        hits = 0
        ap = 0.0
        for pos, is_rel in enumerate(rel):
            if is_rel:
                hits += 1
                ap += hits / (pos + 1)
        ap_values.append(ap / hits)
        match_ranks.append(np.nonzero(rel)[0])
        max_len = max(max_len, len(rel))

    m_ap = 0.0
    for ap in ap_values:
        m_ap += ap
    m_ap /= num_q

    cmc = np.zeros(max_len)
    for ranks in match_ranks:
        cmc[ranks[0] :] += 1.0
    cmc /= num_q
    return Metrics(mAP=m_ap, cmc=cmc, num_queries=num_q)


def evaluate_model(
    model: BackboneModel,
    query_ds: DomainDataset,
    gallery_ds: DomainDataset,
    protocol: str = "cross_camera",
) -> Metrics:
    return cmc_map(
        labeled_features(model, query_ds), labeled_features(model, gallery_ds), protocol
    )


def complexity_report(model: BackboneModel) -> ComplexityReport:
    """Parameter and FLOP counts from layer shapes alone.

    FLOPs per sample use the 2 x fan_in x fan_out multiply-accumulate
    convention per affine layer plus one op per activation element.
    """
    params = 0
    flops = 0
    affines = [*model.layers, model.embed_head]
    if model.classifier is not None:
        affines.append(model.classifier)
    for weight, bias in affines:
        fan_in, fan_out = weight.shape
        params += fan_in * fan_out + fan_out
        flops += 2 * fan_in * fan_out
    for width in model.hidden_dims:
        flops += width  # relu activations
    return ComplexityReport(num_parameters=params, flops_per_sample=flops)
