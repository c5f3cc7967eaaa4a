"""Retrieval metrics (rank@k, mAP) and cluster compactness statistics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .anchors import AnchorSet
from .data import Dataset
from .encoder import EncoderModel, embed_dataset
from .errors import ConfigError
from .losses import EUCLIDEAN, distance_matrix, pair_distance, resolve_metric

DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    rank_at: dict
    mAP: float
    num_queries: int
    excluded_same_group: bool = False
    dropped_queries: int = 0

    @property
    def rank1(self) -> float:
        return self.rank_at.get(1, float("nan"))

    def to_json(self) -> dict:
        out = asdict(self)
        out["rank_at"] = {str(k): v for k, v in self.rank_at.items()}
        return out


@dataclass
class ClusterStats:
    mean_intra: float
    mean_inter: float
    ratio: float


def retrieval_from_features(
    q_feat, q_labels, g_feat, g_labels, metric=EUCLIDEAN, ks=DEFAULT_KS,
    q_groups=None, g_groups=None, exclude_same_group=False,
) -> RetrievalReport:
    """Rank the gallery for every query by ascending distance (ties: lower gallery index).

    With ``exclude_same_group`` gallery items of the query's identity that
    share its group id are removed from the ranking. Queries left with no
    correct match are dropped and counted in ``dropped_queries``.
    """
    metric = resolve_metric(metric)
    q_feat = np.asarray(q_feat, dtype=np.float64)
    g_feat = np.asarray(g_feat, dtype=np.float64)
    if q_feat.shape[0] == 0 or g_feat.shape[0] == 0:
        raise ConfigError("query and gallery must be nonempty")
    q_groups = np.zeros(q_feat.shape[0], np.int64) if q_groups is None else q_groups
    g_groups = np.zeros(g_feat.shape[0], np.int64) if g_groups is None else g_groups
    dist = distance_matrix(q_feat, g_feat, metric)
    first, ap, n_match = kernels.retrieval_scores(
        dist, q_labels, g_labels, q_groups, g_groups, exclude_same_group
    )
    kept = n_match > 0
    n_kept = int(kept.sum())
    ks = sorted({int(k) for k in ks})
    if n_kept == 0:
        rank_at = {k: 0.0 for k in ks}
        mAP = 0.0
    else:
        rank_at = {k: float(np.mean(first[kept] <= k)) for k in ks}
        mAP = float(np.mean(ap[kept]))
    return RetrievalReport(rank_at, mAP, n_kept, bool(exclude_same_group), int((~kept).sum()))


def evaluate_retrieval(
    model: EncoderModel, query: Dataset, gallery: Dataset, metric=EUCLIDEAN, ks=DEFAULT_KS,
    exclude_same_group=False,
) -> RetrievalReport:
    """Embed both splits in inference mode and score retrieval on pre-neck features."""
    qe = embed_dataset(model, query)
    ge = embed_dataset(model, gallery)
    return retrieval_from_features(
        qe.features, qe.labels, ge.features, ge.labels, metric, ks,
        query.groups, gallery.groups, exclude_same_group,
    )


def cluster_stats(features, labels, anchors: AnchorSet, metric=EUCLIDEAN) -> ClusterStats:
    """Mean sample-to-own-anchor distance, mean pairwise anchor distance, and their ratio."""
    metric = resolve_metric(metric)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    d, _ = pair_distance(features - anchors.anchors[labels], metric)
    mean_intra = float(d.mean())
    present = anchors.anchors[anchors.present]
    if present.shape[0] < 2:
        return ClusterStats(mean_intra, 0.0, float("nan"))
    dm = distance_matrix(present, present, metric)
    iu = np.triu_indices(present.shape[0], k=1)
    mean_inter = float(dm[iu].mean())
    ratio = mean_intra / mean_inter if mean_inter > 0 else float("inf")
    return ClusterStats(mean_intra, mean_inter, ratio)
