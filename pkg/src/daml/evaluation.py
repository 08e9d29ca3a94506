"""Re-ID retrieval metrics, cluster quality and the cross-model common-neighbor statistic."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import normalized_mutual_info_score

from .errors import NoValidGallery
from .pseudo_labels import OUTLIER


@dataclass
class RetrievalResult:
    mAP: float
    cmc: np.ndarray
    aps: np.ndarray = field(repr=False)
    first_hits: np.ndarray = field(default=None, repr=False)

    def rank(self, k):
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self):
        return {"mAP": float(self.mAP), "rank1": self.rank(1),
                "rank5": self.rank(5), "rank10": self.rank(10)}


def distance_matrix(query_feats, gallery_feats, metric="cosine"):
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    if metric == "cosine":
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        g = g / np.linalg.norm(g, axis=1, keepdims=True)
        return 1.0 - q @ g.T
    if metric == "euclidean":
        d2 = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2 * q @ g.T
        return np.sqrt(np.maximum(d2, 0.0))
    raise ValueError(f"unknown metric {metric!r}")


def cmc_map(query_feats, gallery_feats, q_pids, g_pids, q_cams, g_cams,
            max_rank=None, metric="cosine") -> RetrievalResult:
    """Single-query Market-1501 protocol.

    Gallery items sharing the query's identity *and* camera are dropped before
    ranking. Ties in distance keep gallery order.
    """
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    dist = distance_matrix(query_feats, gallery_feats, metric)
    max_rank = len(g_pids) if max_rank is None else min(max_rank, len(g_pids))
    order = np.argsort(dist, axis=1, kind="stable")
    cmc = np.zeros((len(q_pids), max_rank))
    aps = np.zeros(len(q_pids))
    first_hits = np.zeros(len(q_pids), dtype=np.int64)
    for i in range(len(q_pids)):
        ranked = order[i]
        keep = ~((g_pids[ranked] == q_pids[i]) & (g_cams[ranked] == q_cams[i]))
        hits = (g_pids[ranked][keep] == q_pids[i])
        if not hits.any():
            raise NoValidGallery(f"query {i} (pid {q_pids[i]}) has no valid positive")
        first = int(np.argmax(hits))
        first_hits[i] = first + 1
        cmc[i, first:] = 1.0
        positions = np.flatnonzero(hits) + 1
        aps[i] = np.mean(np.arange(1, len(positions) + 1) / positions)
    return RetrievalResult(float(aps.mean()), cmc.mean(0), aps, first_hits)


def evaluate_datasets(encoder, query, gallery, metric="cosine", include_distractors=False):
    from .encoders import extract_features

    if not include_distractors:
        gallery = gallery.without_distractors()
    qf = extract_features(encoder, query.images())
    gf = extract_features(encoder, gallery.images())
    return cmc_map(qf, gf, query.person_ids, gallery.person_ids,
                   query.camera_ids, gallery.camera_ids, metric=metric)


def top_k_neighbors(feats, k):
    d = distance_matrix(feats, feats)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def common_neighbors(feats_A, feats_B, k):
    """Mean size of the overlap of the two models' k-nearest-neighbor sets (self excluded).

    The upper bound is k.
    """
    n = len(feats_A)
    if len(feats_B) != n:
        raise ValueError("both feature sets must cover the same samples")
    if k >= n or k < 1:
        raise ValueError(f"k must lie in [1, N), got k={k}, N={n}")
    a, b = top_k_neighbors(feats_A, k), top_k_neighbors(feats_B, k)
    return float(np.mean([len(np.intersect1d(a[i], b[i])) for i in range(n)]))


def purity(labels, truth):
    labels, truth = np.asarray(labels), np.asarray(truth)
    if len(labels) == 0:
        return 0.0
    total = 0
    for c in np.unique(labels):
        _, counts = np.unique(truth[labels == c], return_counts=True)
        total += counts.max()
    return total / len(labels)


def cluster_quality(pseudo_labels, hidden_truth):
    """NMI (arithmetic normalization) and purity over non-outliers."""
    labels = np.asarray(pseudo_labels)
    truth = np.asarray(hidden_truth)
    keep = labels != OUTLIER
    K = len(np.unique(labels[keep]))
    nmi = float(normalized_mutual_info_score(truth[keep], labels[keep])) if keep.any() else 0.0
    return {"NMI": nmi, "purity": float(purity(labels[keep], truth[keep])), "K": int(K),
            "outlier_rate": float(1.0 - keep.mean()) if len(labels) else 0.0}
