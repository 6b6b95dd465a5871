"""Synthetic ground-truth worlds with two-vector users, and the oracle recommender."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingSet, load_embeddings, save_embeddings
from .factorization import RatingDataset, write_ratings_csv
from .recommend import score_multi, top_k, top_k_rows

SIGN_DIMS = 20
VECTORS_PER_USER = 2


class SynthError(ValueError):
    pass


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent Philox stream keyed by ``(seed, crc32(name))``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.Generator(np.random.Philox(ss))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """True item vectors plus two unit vectors per user.

    ``user_vectors`` has shape (n_users, 2, d). Topic worlds also carry
    ``item_topics`` (topic index per item), ``user_minority`` flags,
    ``user_topics`` (the two anchor topics per user) and ``topic_vectors``.
    """

    item_vectors: EmbeddingSet
    user_vectors: np.ndarray
    user_ids: tuple[str, ...]
    minority_topic: int | None = None
    item_topics: np.ndarray | None = None
    user_minority: np.ndarray | None = None
    user_topics: np.ndarray | None = None
    topic_vectors: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        uv = np.asarray(self.user_vectors, dtype=np.float64)
        if uv.ndim != 3 or uv.shape[1] != VECTORS_PER_USER:
            raise SynthError(f"user_vectors must be (n_users, 2, d), got {uv.shape}")
        if np.any(np.abs(np.linalg.norm(uv, axis=2) - 1.0) > 1e-9):
            raise SynthError("user vectors must be unit norm")
        if not self.item_vectors.normalized:
            raise SynthError("item vectors must be normalized")
        labelled = [x is not None for x in (self.item_topics, self.user_minority)]
        if any(labelled) and not all(labelled):
            raise SynthError("topic labels must be given for both items and users")
        object.__setattr__(self, "user_vectors", uv)

    @property
    def n_users(self) -> int:
        return self.user_vectors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_vectors.n

    @property
    def has_topics(self) -> bool:
        return self.item_topics is not None

    def true_scores(self, items=None) -> np.ndarray:
        """users x items matrix of ``max_k u_{i,k} . v_j``."""
        V = self.item_vectors.matrix if items is None else self.item_vectors.matrix[items]
        return np.einsum("ukd,jd->ukj", self.user_vectors, V).max(axis=1)


def _item_ids(n):
    return tuple(f"i{j}" for j in range(n))


def _user_ids(n):
    return tuple(f"u{i}" for i in range(n))


def _sample_ratings(truth: GroundTruth, rating_fraction: float, noise_sd: float,
                    seed: int) -> RatingDataset:
    if not 0.0 < rating_fraction <= 1.0:
        raise SynthError("rating_fraction must lie in (0, 1]")
    if noise_sd < 0:
        raise SynthError("noise_sd must be nonnegative")
    total = truth.n_users * truth.n_items
    count = int(round(rating_fraction * total))
    if count < 1:
        raise SynthError("rating_fraction * n_users * n_items < 1")
    flat = np.sort(rng_stream(seed, "pairs").permutation(total)[:count])
    users, items = np.divmod(flat, truth.n_items)
    V = truth.item_vectors.matrix
    clean = np.einsum("ukd,ud->uk", truth.user_vectors[users], V[items]).max(axis=1)
    noise = rng_stream(seed, "rating-noise").normal(0.0, noise_sd, size=count) if noise_sd else 0.0
    return RatingDataset(users, items, clean + noise, truth.n_users, truth.n_items,
                         truth.user_ids, truth.item_vectors.ids)


def _check_positive(**kwargs):
    for name, value in kwargs.items():
        if value is None or value < 1:
            raise SynthError(f"{name} must be a positive integer, got {value}")


def gen_sphere_world(n_items: int, n_users: int, d: int, rating_fraction: float = 0.1,
                     noise_sd: float = 0.01, seed: int = 0) -> tuple[GroundTruth, RatingDataset]:
    """Items and both vectors of every user uniform on the unit sphere."""
    _check_positive(n_items=n_items, n_users=n_users, d=d)
    items = _unit_rows(rng_stream(seed, "items").standard_normal((n_items, d)))
    users = _unit_rows(rng_stream(seed, "users").standard_normal((n_users, VECTORS_PER_USER, d)))
    params = dict(world="sphere", n_items=n_items, n_users=n_users, d=d,
                  rating_fraction=rating_fraction, noise_sd=noise_sd, seed=seed)
    truth = GroundTruth(EmbeddingSet(_item_ids(n_items), items, normalized=True), users,
                        _user_ids(n_users), params=params)
    return truth, _sample_ratings(truth, rating_fraction, noise_sd, seed)


def make_topics(n_topics: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Unit topic anchors; the last is the minority topic.

    The first ``SIGN_DIMS`` coordinates are forced positive for majority
    topics and negative for the minority topic.
    """
    topics = _unit_rows(rng.standard_normal((n_topics, d)))
    topics[:, :SIGN_DIMS] = np.abs(topics[:, :SIGN_DIMS])
    topics[-1, :SIGN_DIMS] *= -1.0
    return topics


def gen_topic_world(n_items: int, n_users: int, d: int = 64, n_topics: int = 5,
                    minority_user_fraction: float = 0.2, topic_noise_sd: float = 0.05,
                    rating_fraction: float = 0.1, rating_noise_sd: float = 0.01,
                    seed: int = 0) -> tuple[GroundTruth, RatingDataset]:
    """Topic-structured world whose minority topic is anti-correlated with the rest.

    Items sit around one uniformly drawn topic. Majority users draw both
    anchors from the majority topics (with replacement); minority users get
    one minority anchor and one majority anchor. All vectors are re-normalized
    after the per-coordinate noise.
    """
    _check_positive(n_items=n_items, n_users=n_users)
    if n_topics < 2:
        raise SynthError("n_topics must be >= 2")
    if d < SIGN_DIMS:
        raise SynthError(f"d must be >= {SIGN_DIMS} for the sign construction, got {d}")
    if not 0.0 <= minority_user_fraction <= 1.0:
        raise SynthError("minority_user_fraction must lie in [0, 1]")
    if topic_noise_sd < 0:
        raise SynthError("topic_noise_sd must be nonnegative")
    minority = n_topics - 1
    n_major = n_topics - 1
    topics = make_topics(n_topics, d, rng_stream(seed, "topics"))

    rng = rng_stream(seed, "items")
    item_topics = rng.integers(0, n_topics, size=n_items)
    items = _unit_rows(topics[item_topics] + rng.normal(0.0, topic_noise_sd, size=(n_items, d)))

    rng = rng_stream(seed, "users")
    n_minority = int(np.floor(minority_user_fraction * n_users))
    is_minority = np.zeros(n_users, dtype=bool)
    is_minority[rng.permutation(n_users)[:n_minority]] = True
    anchors = rng.integers(0, n_major, size=(n_users, VECTORS_PER_USER))
    anchors[is_minority, 0] = minority
    noise = rng.normal(0.0, topic_noise_sd, size=(n_users, VECTORS_PER_USER, d))
    users = _unit_rows(topics[anchors] + noise)

    params = dict(world="topic", n_items=n_items, n_users=n_users, d=d, n_topics=n_topics,
                  minority_user_fraction=minority_user_fraction, topic_noise_sd=topic_noise_sd,
                  rating_fraction=rating_fraction, noise_sd=rating_noise_sd, seed=seed,
                  renormalize_users=True)
    truth = GroundTruth(EmbeddingSet(_item_ids(n_items), items, normalized=True), users,
                        _user_ids(n_users), minority_topic=minority, item_topics=item_topics,
                        user_minority=is_minority, user_topics=anchors, topic_vectors=topics,
                        params=params)
    return truth, _sample_ratings(truth, rating_fraction, rating_noise_sd, seed)


def oracle_top_k(truth: GroundTruth, user: int, candidates=None, k: int = 2) -> tuple[int, ...]:
    """Top-``k`` by the user's true two-vector max score, as indices into ``candidates``.

    ``candidates`` defaults to every item; returned indices are global item
    indices when candidates is None, else positions within ``candidates``.
    """
    if not 0 <= user < truth.n_users:
        raise SynthError(f"user index {user} out of range")
    V = truth.item_vectors.matrix
    if candidates is not None:
        V = V[list(candidates)]
    return top_k(score_multi(truth.user_vectors[user], V), k)


def oracle_top_k_all(truth: GroundTruth, candidates, k: int = 2) -> np.ndarray:
    """Row-wise oracle top-``k`` (positions within ``candidates``) for every user."""
    return top_k_rows(truth.true_scores(list(candidates)), k)


# -- files ------------------------------------------------------------------

ITEMS_FILE = "truth_items.csv"
USERS_FILE = "truth_users.csv"
SIDECAR_FILE = "truth.json"
RATINGS_FILE = "ratings.csv"


def save_world(truth: GroundTruth, ratings: RatingDataset, out_dir) -> list[Path]:
    """Write the four world files; user rows are ``<user_id>/<k>`` for k = 0, 1."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(truth.item_vectors, out / ITEMS_FILE)
    d = truth.user_vectors.shape[2]
    user_rows = truth.user_vectors.reshape(-1, d)
    user_ids = tuple(f"{u}/{k}" for u in truth.user_ids for k in range(VECTORS_PER_USER))
    save_embeddings(EmbeddingSet(user_ids, user_rows, normalized=True), out / USERS_FILE)
    sidecar = {"format_version": 1, "params": truth.params,
               "rng": "numpy Philox; stream key (seed, crc32(name))",
               "user_vector_id_format": "<user_id>/<k>",
               "minority_topic": truth.minority_topic}
    if truth.has_topics:
        sidecar["item_topics"] = {i: int(t) for i, t in zip(truth.item_vectors.ids, truth.item_topics)}
        sidecar["user_minority"] = {u: bool(m) for u, m in zip(truth.user_ids, truth.user_minority)}
        sidecar["user_topics"] = {u: [int(x) for x in t] for u, t in zip(truth.user_ids, truth.user_topics)}
        sidecar["topic_vectors"] = [[format(float(x), ".17g") for x in row] for row in truth.topic_vectors]
    (out / SIDECAR_FILE).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    write_ratings_csv(ratings, out / RATINGS_FILE)
    return [out / ITEMS_FILE, out / USERS_FILE, out / SIDECAR_FILE, out / RATINGS_FILE]


def load_world(directory) -> GroundTruth:
    """Read the ground truth written by :func:`save_world` (ratings excluded)."""
    directory = Path(directory)
    items = load_embeddings(directory / ITEMS_FILE)
    items = EmbeddingSet(items.ids, items.matrix, normalized=True)
    rows = load_embeddings(directory / USERS_FILE)
    sidecar = json.loads((directory / SIDECAR_FILE).read_text(encoding="utf-8"))
    user_ids: list[str] = []
    slots: dict[str, list[np.ndarray]] = {}
    for rid, vec in zip(rows.ids, rows.matrix):
        uid, _, _ = rid.rpartition("/")
        if uid not in slots:
            user_ids.append(uid)
            slots[uid] = []
        slots[uid].append(vec)
    uv = np.array([slots[u] for u in user_ids])
    kwargs = {}
    if "item_topics" in sidecar:
        kwargs = dict(
            minority_topic=sidecar["minority_topic"],
            item_topics=np.array([sidecar["item_topics"][i] for i in items.ids]),
            user_minority=np.array([sidecar["user_minority"][u] for u in user_ids]),
            user_topics=np.array([sidecar["user_topics"][u] for u in user_ids]),
            topic_vectors=np.array([[float(x) for x in r] for r in sidecar["topic_vectors"]]),
        )
    return GroundTruth(items, uv, tuple(user_ids), params=sidecar.get("params", {}), **kwargs)
