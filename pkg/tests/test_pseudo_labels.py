import math

import numpy as np
import pytest

from daml.data import AugmentPolicy
from daml.encoders import extract_features
from daml.errors import ZeroVector
from daml.evaluation import cluster_quality
from daml.pseudo_labels import (OUTLIER, cluster, clustering_features, compute_centers,
                                cosine_distance, generate_pseudo_labels, joint_distance,
                                neighbor_graph, relabel_by_appearance)
from oracles import brute_dbscan

DIAG = np.array([[1.0, 0.0], [math.sqrt(0.5), math.sqrt(0.5)]])


def test_identical_rows_are_neighbors():
    f = np.array([[1.0, 2.0], [1.0, 2.0]])
    assert neighbor_graph(f, f, 0.5).all()


def test_student_subspace_vetoes():
    orth = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert 1 - DIAG[0] @ DIAG[1] == pytest.approx(1 - math.sqrt(0.5))
    assert not neighbor_graph(DIAG, orth, 0.5)[0, 1]


def test_both_subspaces_at_45_degrees_are_neighbors():
    assert neighbor_graph(DIAG, DIAG, 0.5)[0, 1]


def test_zero_row_raises():
    with pytest.raises(ZeroVector):
        neighbor_graph(np.zeros((2, 3)), np.ones((2, 3)))


def test_joint_distance_concatenation_example():
    fT = np.array([[1.0, 0.0], [1.0, 0.0]])
    fS = np.array([[1.0, 0.0], [0.0, 1.0]])
    graph = np.ones((2, 2), bool)
    d = joint_distance(fT, fS, graph)
    assert d[0, 1] == pytest.approx(0.5, abs=1e-12)
    assert d[0, 0] == 0.0


def test_joint_distance_gate():
    fT = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    fS = fT.copy()
    d = joint_distance(fT, fS, neighbor_graph(fT, fS, 0.5))
    assert d[0, 1] == pytest.approx(0.0, abs=1e-12)
    assert np.isinf(d[0, 2]) and np.isinf(d[2, 1])
    assert np.all(np.diag(d) == 0)


def test_prenormalize_weighs_subspaces_equally():
    fT = np.array([[100.0, 0.0], [100.0, 0.0]])
    fS = np.array([[1.0, 0.0], [0.0, 1.0]])
    g = np.ones((2, 2), bool)
    # raw concatenation is dominated by the large teacher features
    assert joint_distance(fT, fS, g)[0, 1] < 1e-3
    assert joint_distance(fT, fS, g, prenormalize=True)[0, 1] == pytest.approx(0.5)


def test_two_groups_give_two_clusters():
    inf = np.inf
    d = np.array([[0, 0, inf, inf], [0, 0, inf, inf], [inf, inf, 0, 0], [inf, inf, 0, 0]])
    assert cluster(d, 0.6, 2).tolist() == [0, 0, 1, 1]


def test_isolated_point_is_outlier():
    inf = np.inf
    d = np.array([[0, 0, inf], [0, 0, inf], [inf, inf, 0]])
    assert cluster(d, 0.6, 2).tolist() == [0, 0, OUTLIER]


def test_three_point_chain_is_one_cluster():
    d = np.array([[0, 0.5, 1.5], [0.5, 0, 0.5], [1.5, 0.5, 0]])
    assert cluster(d, 0.6, 2).tolist() == [0, 0, 0]


def test_cluster_ids_follow_first_appearance():
    assert relabel_by_appearance([5, -1, 2, 5, 2]).tolist() == [0, -1, 1, 0, 1]


def test_empty_matrix():
    assert len(cluster(np.zeros((0, 0)))) == 0


def test_cluster_matches_brute_force_small(rng):
    for _ in range(30):
        n = int(rng.integers(2, 13))
        pts = rng.normal(size=(n, 2))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        eps, ms = float(rng.uniform(0.3, 1.2)), int(rng.integers(1, 4))
        assert cluster(d, eps, ms).tolist() == brute_dbscan(d, eps, ms).tolist()


def test_infinity_separated_components_never_merge(rng):
    for _ in range(20):
        n = 30
        group = rng.integers(0, 3, size=n)
        d = np.where(group[:, None] == group[None, :], rng.uniform(0, 0.3, (n, n)), np.inf)
        d = np.minimum(d, d.T)
        np.fill_diagonal(d, 0)
        labels = cluster(d, 0.6, 2)
        for lab in set(labels[labels >= 0].tolist()):
            assert len(set(group[labels == lab].tolist())) == 1


def test_center_examples():
    fT = np.array([[1.0, 0.0], [0.0, 1.0], [3.0, 3.0]])
    cT, cS = compute_centers(fT, fT * 2, np.array([0, 0, 1]))
    assert np.allclose(cT, [[0.5, 0.5], [3.0, 3.0]])
    assert np.allclose(cS, 2 * cT)


def test_centers_ignore_outliers_and_order(rng):
    f = rng.normal(size=(10, 3))
    labels = np.array([0, 1, -1, 0, 1, 2, -1, 2, 0, 1])
    perm = rng.permutation(10)
    a = compute_centers(f, f, labels)[0]
    b = compute_centers(f[perm], f[perm], labels[perm])[0]
    assert np.allclose(a, b, atol=1e-14)
    assert np.allclose(a[0], f[[0, 3, 8]].mean(0))


def test_clustering_features_repeat_contract(tiny_bench):
    from daml.encoders import build_encoder, teacher_config
    enc = build_encoder(teacher_config((32, 16), 8, depth=2, width=4), seed=0)
    ds = tiny_bench["target"]
    plain = extract_features(enc, ds.images())
    assert np.array_equal(clustering_features(enc, ds, repeat=0), plain)
    ident = AugmentPolicy.identity((32, 16))
    assert np.allclose(clustering_features(enc, ds, ident, 1, np.random.default_rng(0)), plain)
    erase = AugmentPolicy(0.0, 1.0, False, (32, 16))
    a = clustering_features(enc, ds, erase, 2, np.random.default_rng(5))
    b = clustering_features(enc, ds, erase, 2, np.random.default_rng(5))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        clustering_features(enc, ds, erase, -1)


def test_gate_soundness_small(rng):
    # the exhaustive N <= 200 sweep lives in the acceptance suite
    for _ in range(5):
        fT, fS = rng.normal(size=(20, 4)), rng.normal(size=(20, 3))
        d = joint_distance(fT, fS, neighbor_graph(fT, fS, 0.8))
        both = (cosine_distance(fT) < 0.8) & (cosine_distance(fS) < 0.8)
        off = ~np.eye(20, dtype=bool)
        assert np.array_equal(np.isfinite(d)[off], both[off])


def test_pseudo_labels_recover_identities_without_shift(desk_pretrained):
    bench, _, hp, (t, s) = desk_pretrained
    ds = bench["source"]
    fT, fS = extract_features(t.encoder, ds.images()), extract_features(s.encoder, ds.images())
    same = ds.person_ids[:, None] == ds.person_ids[None, :]
    for f in (fT, fS):
        d = cosine_distance(f)
        # the premise: identities are tight in both subspaces and apart from each other
        assert d[same].max() < hp.alpha and d[~same].min() > hp.eps
    pl = generate_pseudo_labels(fT, fS, hp.alpha, hp.eps, hp.min_samples)
    assert cluster_quality(pl.labels, ds.person_ids)["NMI"] >= 0.95
