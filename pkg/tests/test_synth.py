import numpy as np
import pytest

from jointaccess.embeddings import EmbeddingSet, UserRep
from jointaccess.recommend import score_multi, top_k
from jointaccess.synth import (
    SIGN_DIMS, GroundTruth, SynthError, gen_sphere_world, gen_topic_world, load_world,
    oracle_top_k, oracle_top_k_all, rng_stream, save_world,
)


def test_sphere_noiseless_ratings_exact():
    truth, data = gen_sphere_world(40, 30, 5, rating_fraction=0.2, noise_sd=0.0, seed=1)
    T = truth.true_scores()
    assert np.array_equal(data.ratings, T[data.users, data.items])
    assert data.ratings.min() >= -1.0 and data.ratings.max() <= 1.0
    assert len(data) == round(0.2 * 40 * 30)


def test_sphere_unit_vectors_and_concentration():
    truth, _ = gen_sphere_world(400, 10, 64, seed=2)
    V = truth.item_vectors.matrix
    np.testing.assert_allclose(np.linalg.norm(V, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(truth.user_vectors, axis=2), 1.0, atol=1e-12)
    dots = (V @ V.T)[np.triu_indices(400, 1)]
    assert abs(dots.mean()) < 0.01 and dots.std() < 0.2


def test_no_duplicate_pairs_and_determinism():
    t1, d1 = gen_sphere_world(50, 60, 4, rating_fraction=0.3, seed=3)
    t2, d2 = gen_sphere_world(50, 60, 4, rating_fraction=0.3, seed=3)
    keys = d1.users * 50 + d1.items
    assert np.unique(keys).size == keys.size
    assert np.array_equal(t1.item_vectors.matrix, t2.item_vectors.matrix)
    assert np.array_equal(t1.user_vectors, t2.user_vectors)
    assert np.array_equal(d1.ratings, d2.ratings) and np.array_equal(d1.items, d2.items)
    _, d3 = gen_sphere_world(50, 60, 4, rating_fraction=0.3, seed=4)
    assert not np.array_equal(d1.ratings, d3.ratings)


def test_sphere_errors():
    with pytest.raises(SynthError):
        gen_sphere_world(2, 2, 2, rating_fraction=0.01)
    with pytest.raises(SynthError):
        gen_sphere_world(0, 2, 2)
    with pytest.raises(SynthError):
        gen_sphere_world(5, 5, 2, rating_fraction=1.5)


def test_topic_sign_construction():
    truth, _ = gen_topic_world(60, 50, 64, seed=5)
    T = truth.topic_vectors
    mino = truth.minority_topic
    for t in range(len(T)):
        if t != mino:
            assert T[mino, :SIGN_DIMS] @ T[t, :SIGN_DIMS] < 0
            assert np.all(T[t, :SIGN_DIMS] >= 0)
    assert np.all(T[mino, :SIGN_DIMS] <= 0)


def test_topic_minority_count_and_anchors():
    truth, _ = gen_topic_world(60, 103, 64, seed=6)
    assert truth.user_minority.sum() == int(0.2 * 103)
    mino = truth.minority_topic
    for u in range(truth.n_users):
        n_min = int(np.sum(truth.user_topics[u] == mino))
        assert n_min == (1 if truth.user_minority[u] else 0)


def test_topic_errors():
    with pytest.raises(SynthError):
        gen_topic_world(10, 10, 10)
    with pytest.raises(SynthError):
        gen_topic_world(10, 10, 64, n_topics=1)


def test_minority_anchor_least_similar_over_seeds():
    for seed in range(20):
        truth, _ = gen_topic_world(20, 20, 64, seed=seed)
        T = truth.topic_vectors / np.linalg.norm(truth.topic_vectors, axis=1, keepdims=True)
        C = T @ T.T
        np.fill_diagonal(C, 0.0)
        mean_cos = C.sum(axis=1) / (len(T) - 1)
        assert int(np.argmin(mean_cos)) == truth.minority_topic, seed


def test_minority_items_preferred_by_minority_users():
    for seed in range(3):
        truth, _ = gen_topic_world(100, 200, 64, seed=seed)
        T = truth.true_scores()
        minority_items = truth.item_topics == truth.minority_topic
        by_min = T[truth.user_minority][:, minority_items].mean()
        by_maj = T[~truth.user_minority][:, minority_items].mean()
        assert by_min > by_maj


def test_oracle_self_match():
    V = np.eye(4)
    truth = GroundTruth(EmbeddingSet.from_matrix(V, normalized=True),
                        np.array([[V[1], V[3]]]), ("u0",))
    assert oracle_top_k(truth, 0) == (1, 3)
    assert oracle_top_k(truth, 0, k=1) == (1,)
    with pytest.raises(SynthError):
        oracle_top_k(truth, 5)


def test_oracle_composition():
    truth, _ = gen_sphere_world(30, 20, 4, seed=7)
    cand = np.arange(0, 30, 2)
    all_recs = oracle_top_k_all(truth, cand, 2)
    for u in range(20):
        scores = score_multi(UserRep(truth.user_vectors[u]), truth.item_vectors)[cand]
        expected = top_k(scores, 2)
        assert oracle_top_k(truth, u, cand) == expected
        assert tuple(all_recs[u]) == expected


def test_rng_streams_independent():
    a = rng_stream(1, "items").standard_normal(3)
    assert np.array_equal(a, rng_stream(1, "items").standard_normal(3))
    assert not np.array_equal(a, rng_stream(1, "users").standard_normal(3))


def test_world_roundtrip(tmp_path):
    truth, data = gen_topic_world(30, 25, 64, seed=8)
    paths = save_world(truth, data, tmp_path / "w")
    assert len(paths) == 4 and all(p.exists() for p in paths)
    back = load_world(tmp_path / "w")
    assert np.array_equal(back.item_vectors.matrix, truth.item_vectors.matrix)
    assert np.array_equal(back.user_vectors, truth.user_vectors)
    assert np.array_equal(back.item_topics, truth.item_topics)
    assert np.array_equal(back.user_minority, truth.user_minority)
    assert back.minority_topic == truth.minority_topic
    first = [p.read_bytes() for p in paths]
    save_world(truth, data, tmp_path / "w")
    assert first == [p.read_bytes() for p in paths]
