"""Joint-subspace pseudo labels: dual neighbor gating, concatenated cosine distance, DBSCAN."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import DBSCAN

from .data import AugmentPolicy, augment_batch
from .encoders import extract_features
from .errors import EmptyCluster, ZeroVector

OUTLIER = -1


@dataclass
class PseudoLabelState:
    labels: np.ndarray
    centers_T: np.ndarray
    centers_S: np.ndarray

    @property
    def K(self):
        return len(self.centers_T)

    @property
    def num_outliers(self):
        return int((self.labels == OUTLIER).sum())

    @property
    def clustered(self):
        return np.flatnonzero(self.labels != OUTLIER)


def _unit_rows(feats):
    feats = np.asarray(feats, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector("feature row with zero norm")
    return feats / norms


def cosine_distance(a, b=None):
    a = _unit_rows(a)
    b = a if b is None else _unit_rows(b)
    return 1.0 - a @ b.T


def neighbor_graph(feats_T, feats_S, alpha=0.5) -> np.ndarray:
    """adjacency[i, j] is True when i and j are closer than alpha in both subspaces."""
    if len(feats_T) != len(feats_S):
        raise ValueError("teacher and student features must cover the same samples")
    adj = (cosine_distance(feats_T) < alpha) & (cosine_distance(feats_S) < alpha)
    np.fill_diagonal(adj, True)
    return adj


def joint_distance(feats_T, feats_S, graph, prenormalize=False) -> np.ndarray:
    """Cosine distance of concatenated features, Infinity unless mutually adjacent.

    With ``prenormalize`` each subspace is L2-normalized before concatenation,
    which weighs both subspaces equally regardless of feature scale.
    """
    if prenormalize:
        feats_T, feats_S = _unit_rows(feats_T), _unit_rows(feats_S)
    joint = np.concatenate([np.asarray(feats_T, float), np.asarray(feats_S, float)], axis=1)
    d = cosine_distance(joint)
    d = np.clip((d + d.T) / 2, 0.0, 2.0)
    mutual = graph & graph.T
    d[~mutual] = np.inf
    np.fill_diagonal(d, 0.0)
    return d


def relabel_by_appearance(labels):
    """Renumber clusters 0..K-1 in order of their first member; outliers stay -1."""
    out = np.full(len(labels), OUTLIER, dtype=np.int64)
    mapping = {}
    for i, lab in enumerate(labels):
        if lab < 0:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def cluster(d, eps=0.6, min_samples=4) -> np.ndarray:
    """DBSCAN over a precomputed distance matrix; Infinity never links points.

    ``min_samples`` counts the point itself, as in sklearn.
    """
    d = np.asarray(d, dtype=np.float64)
    if len(d) == 0:
        return np.zeros(0, dtype=np.int64)
    # sklearn rejects inf; any value above eps is equivalent
    finite = np.where(np.isfinite(d), d, max(2.0, eps) * 10 + 1.0)
    labels = DBSCAN(eps=eps, min_samples=min_samples, metric="precomputed").fit(finite).labels_
    return relabel_by_appearance(labels)


def compute_centers(feats_T, feats_S, labels):
    labels = np.asarray(labels)
    K = int(labels.max()) + 1 if np.any(labels >= 0) else 0
    centers = []
    for feats in (np.asarray(feats_T, float), np.asarray(feats_S, float)):
        c = np.zeros((K, feats.shape[1]))
        for k in range(K):
            members = labels == k
            if not members.any():
                raise EmptyCluster(f"cluster {k} has no members")
            c[k] = feats[members].mean(axis=0)
        centers.append(c)
    return centers[0], centers[1]


def clustering_features(encoder, dataset, policy: AugmentPolicy = None, repeat=0,
                        rng=None, images=None) -> np.ndarray:
    """Eval-mode features averaged over the original image and ``repeat`` augmented copies."""
    if repeat < 0:
        raise ValueError("repeat must be >= 0")
    images = dataset.images() if images is None else images
    feats = extract_features(encoder, images)
    if repeat == 0:
        return feats
    rng = np.random.default_rng() if rng is None else rng
    total = feats.copy()
    for _ in range(repeat):
        total += extract_features(encoder, augment_batch(images, policy, rng))
    return total / (repeat + 1)


def generate_pseudo_labels(feats_T, feats_S, alpha=0.5, eps=0.6, min_samples=4,
                           prenormalize=False) -> PseudoLabelState:
    graph = neighbor_graph(feats_T, feats_S, alpha)
    d = joint_distance(feats_T, feats_S, graph, prenormalize)
    labels = cluster(d, eps, min_samples)
    centers_T, centers_S = compute_centers(feats_T, feats_S, labels)
    return PseudoLabelState(labels, centers_T, centers_S)
