import math

import numpy as np
import pytest

from jointaccess.audit import (
    AuditError, THREADS_ENV, assign_topics, bin_means, binned_heuristic_accessibility,
    empirical_pair_census, equal_width_edges, exact_inaccessible_sets, max_workers,
    minority_exposure, oracle_pair_census, pair_accessibility, pair_census, select_subset,
    similarity_binned_counts, subset_pairs, topic_pair_matrix, user_diversity_table,
)
from jointaccess.embeddings import EmbeddingSet
from jointaccess.factorization import FactorModel, train_als
from jointaccess.synth import GroundTruth, gen_sphere_world, gen_topic_world


@pytest.fixture(scope="module")
def sphere():
    truth, data = gen_sphere_world(60, 400, 6, rating_fraction=0.3, seed=1)
    model = train_als(data, 6, 0.1, iterations=8, seed=1)
    return truth, model


@pytest.fixture(scope="module")
def topic():
    truth, data = gen_topic_world(80, 300, 64, rating_fraction=0.3, seed=2)
    model = train_als(data, 8, 0.5, iterations=5, seed=2, norm_constraint=True)
    return truth, model


def test_census_single_user():
    model = FactorModel(np.array([[1.0, 0.0]]), np.random.default_rng(0).standard_normal((6, 2)))
    c = empirical_pair_census(model, np.arange(6))
    assert c.unique_count == 1 and c.unique_fraction == pytest.approx(1 / 15)


def test_census_identical_users_and_conservation(sphere):
    V = np.random.default_rng(1).standard_normal((8, 3))
    same = FactorModel(np.ones((20, 3)), V)
    assert empirical_pair_census(same, np.arange(8)).unique_count == 1
    truth, model = sphere
    c = empirical_pair_census(model, np.arange(60))
    assert sum(c.counts.values()) == c.n_users
    subset = np.arange(60)
    assert c.pair_counts(subset_pairs(subset)).sum() == c.n_users


def test_census_small_subset_error():
    with pytest.raises(AuditError):
        pair_census(np.ones((3, 1)), np.arange(1), 2)


def test_single_bin_mean_conservation(sphere):
    truth, model = sphere
    c = empirical_pair_census(model, np.arange(60))
    curve = similarity_binned_counts(c, truth.item_vectors, bins=1)
    assert curve.values[0] == pytest.approx(c.n_users / math.comb(60, 2))


def test_bins_cover_range_and_empty_bins():
    x = np.array([0.0, 0.1, 0.9, 1.0])
    curve = bin_means(x, np.array([1.0, 2.0, 3.0, 4.0]), 4)
    assert curve.edges[0] == 0.0 and curve.edges[-1] == 1.0
    assert curve.counts.tolist() == [2, 0, 0, 2]
    assert curve.values[1] == 0.0
    with pytest.raises(AuditError):
        equal_width_edges(x, 0)


def test_heuristic_curve_bounded_by_exact():
    rng = np.random.default_rng(3)
    items = EmbeddingSet.from_matrix(rng.standard_normal((15, 3)))
    subset = np.arange(15)
    h_curve, h = binned_heuristic_accessibility(items, subset, 4)
    e_curve, e = binned_heuristic_accessibility(items, subset, 4, method="exact")
    assert np.all(e[h])
    assert np.all(h_curve.values <= e_curve.values + 1e-12)


def test_multi_witness_oracle_line_is_one(sphere):
    truth, _ = sphere
    curve, flags = binned_heuristic_accessibility(truth.item_vectors, np.arange(30), 5,
                                                  method="multi-witness")
    assert flags.all()
    assert np.all(curve.values[curve.counts > 0] == 1.0)


def test_single_pair_subset():
    items = EmbeddingSet.from_matrix(np.eye(3))
    curve, flags = binned_heuristic_accessibility(items, np.array([0, 1]), 3)
    assert flags.shape == (1,) and curve.values[curve.counts > 0][0] in (0.0, 1.0)


def test_topic_matrix_properties(topic):
    truth, model = topic
    items = EmbeddingSet.from_matrix(model.item_matrix)
    M = topic_pair_matrix(items, truth.item_topics, n_topics=5)
    assert np.allclose(M, M.T, equal_nan=True)
    assert np.all((M[~np.isnan(M)] >= 0) & (M[~np.isnan(M)] <= 1))
    labels = truth.item_topics.copy()
    labels[labels == 4] = 3
    with pytest.raises(AuditError, match="topic 4"):
        topic_pair_matrix(items, labels, n_topics=5)


def test_assign_topics(topic):
    truth, _ = topic
    labels = assign_topics(truth.item_vectors.matrix, truth.topic_vectors)
    assert np.mean(labels == truth.item_topics) > 0.95


def test_minority_exposure(topic):
    truth, model = topic
    ex = minority_exposure(model, truth, np.arange(80))
    for side in ("model", "oracle"):
        for key in ("minority_item_fraction", "mixed_topic_fraction"):
            assert 0.0 <= ex[side][key] <= 1.0
    assert ex["n_minority_users"] == int(truth.user_minority.sum())
    no_min = GroundTruth(truth.item_vectors, truth.user_vectors, truth.user_ids,
                         truth.minority_topic, truth.item_topics,
                         np.zeros(truth.n_users, dtype=bool), truth.user_topics,
                         truth.topic_vectors)
    with pytest.raises(AuditError):
        minority_exposure(model, no_min, np.arange(80))
    sphere_truth, _ = gen_sphere_world(10, 10, 3, seed=0)
    with pytest.raises(AuditError):
        minority_exposure(model, sphere_truth, np.arange(10))


def test_oracle_mixed_pair_for_clean_minority_user():
    T = np.eye(3)
    raw = np.vstack([T, 0.9 * T + 0.1 * np.roll(T, 1, axis=1)])
    items = EmbeddingSet.from_matrix(raw / np.linalg.norm(raw, axis=1, keepdims=True),
                                     normalized=True)
    labels = np.array([0, 1, 2, 0, 1, 2])
    truth = GroundTruth(items, np.array([[T[2], T[0]]]), ("u",), minority_topic=2,
                        item_topics=labels, user_minority=np.array([True]),
                        user_topics=np.array([[2, 0]]), topic_vectors=T)
    model = FactorModel(np.array([[1.0, 0.0, 0.0]]), items.matrix)
    ex = minority_exposure(model, truth, np.arange(6))
    assert ex["oracle"]["mixed_topic_fraction"] == 1.0


def test_user_diversity_identical_vectors():
    V = np.eye(4)
    items = EmbeddingSet.from_matrix(V, normalized=True)
    truth = GroundTruth(items, np.array([[V[0], V[0]], [V[0], V[1]]]), ("a", "b"))
    model = FactorModel(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]), V)
    table = user_diversity_table(truth, model, np.arange(4), bins=2)
    assert table["model"].edges[-1] == 1.0


def test_user_diversity_trends(sphere):
    truth, model = sphere
    table = user_diversity_table(truth, model, np.arange(60), bins=5)
    assert table["oracle"].spearman() > 0
    assert table["model_mean"] >= table["oracle_mean"]


def test_select_subset():
    counts = np.array([5, 1, 5, 9, 0])
    assert select_subset(5, 2, "popular", counts).tolist() == [0, 3]
    assert select_subset(5, 3, "first").tolist() == [0, 1, 2]
    r = select_subset(5, 3, "random", seed=1)
    assert r.tolist() == select_subset(5, 3, "random", seed=1).tolist() and len(set(r)) == 3
    assert select_subset(5, 10, "popular").tolist() == list(range(5))
    with pytest.raises(AuditError):
        select_subset(5, 2, "popular")
    with pytest.raises(AuditError):
        select_subset(5, 2, "weird", counts)


def test_exact_inaccessible_and_pair_methods():
    items = EmbeddingSet.from_matrix(np.array([[2.0, 4], [-2, 2], [-3, -1], [3, -3]]))
    n, bad = exact_inaccessible_sets(items, np.arange(4), 2)
    assert n == 6 and sorted(bad) == [(0, 2), (1, 3)]
    pairs = subset_pairs(np.arange(4))
    exact = pair_accessibility(items, pairs, method="exact")
    assert exact.tolist() == [True, False, True, True, False, True]
    with pytest.raises(AuditError):
        pair_accessibility(items, pairs, method="nope")


def test_max_workers_env(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert max_workers() == 3
    monkeypatch.setenv(THREADS_ENV, "x")
    with pytest.raises(AuditError):
        max_workers()
