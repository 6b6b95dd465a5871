"""Population-level accessibility audits of a trained single-vector model.

Item indices are global throughout: ``subset`` arrays hold indices into the
item matrices, and model and ground truth share item order.
"""
from __future__ import annotations

import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.stats import spearmanr

from .accessibility import heuristic_margins, joint_accessible, multi_vector_accessible
from .embeddings import EmbeddingSet, similarity_matrix
from .factorization import FactorModel
from .numerics import DEFAULT_TOLERANCE
from .recommend import top_k_rows
from .synth import GroundTruth, rng_stream

REPORT_VERSION = 1
DEFAULT_BINS = 10
DEFAULT_SUBSET = 400
THREADS_ENV = "JOINT_ACCESS_THREADS"


class AuditError(ValueError):
    pass


def max_workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise AuditError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def select_subset(n_items: int, size: int | None = DEFAULT_SUBSET, mode: str = "popular",
                  counts=None, seed: int = 0) -> np.ndarray:
    """Sorted global indices of the audited items.

    ``popular`` takes the most-rated items (ties to the lower index),
    ``random`` a seeded uniform sample, ``first`` the leading indices.
    """
    if size is None or size >= n_items:
        return np.arange(n_items)
    if size < 1:
        raise AuditError("subset size must be >= 1")
    if mode == "popular":
        if counts is None:
            raise AuditError("popular subset needs rating counts")
        chosen = np.argsort(-np.asarray(counts), kind="stable")[:size]
    elif mode == "random":
        chosen = rng_stream(seed, "subset").choice(n_items, size=size, replace=False)
    elif mode == "first":
        chosen = np.arange(size)
    else:
        raise AuditError(f"unknown subset mode {mode!r}")
    return np.sort(chosen)


def subset_pairs(subset: np.ndarray) -> np.ndarray:
    """(P, 2) global index pairs over the subset, lexicographic."""
    a, b = np.triu_indices(len(subset), 1)
    return np.column_stack([subset[a], subset[b]])


# -- census -------------------------------------------------------------------

@dataclass
class PairCensus:
    """How often each size-``k`` set was some user's top-``k``."""

    subset: np.ndarray
    k: int
    counts: Counter
    n_users: int

    @property
    def unique_count(self) -> int:
        return len(self.counts)

    @property
    def unique_fraction(self) -> float:
        return self.unique_count / math.comb(len(self.subset), self.k)

    def pair_counts(self, pairs: np.ndarray) -> np.ndarray:
        """Number of users whose top-k contains both items of each pair."""
        together = Counter()
        for rec, c in self.counts.items():
            for pair in combinations(rec, 2):
                together[pair] += c
        return np.array([together.get((int(a), int(b)), 0) for a, b in pairs], dtype=float)

    def to_json(self, ids) -> list:
        return [{"items": [ids[i] for i in rec], "count": c}
                for rec, c in sorted(self.counts.items())]


def pair_census(scores: np.ndarray, subset: np.ndarray, k: int = 2) -> PairCensus:
    """Census from a users x subset score matrix."""
    subset = np.asarray(subset)
    if len(subset) < k:
        raise AuditError(f"subset of {len(subset)} items is smaller than k={k}")
    recs = subset[top_k_rows(scores, k)]
    counts = Counter(tuple(int(x) for x in row) for row in recs)
    return PairCensus(subset, k, counts, scores.shape[0])


def active_users(model: FactorModel) -> np.ndarray:
    """Users with a nonzero vector; cold users are skipped by every audit."""
    return np.flatnonzero(np.any(model.user_matrix != 0.0, axis=1))


def empirical_pair_census(model: FactorModel, subset, k: int = 2) -> PairCensus:
    users = active_users(model)
    scores = model.user_matrix[users] @ model.item_matrix[np.asarray(subset)].T
    return pair_census(scores, subset, k)


def oracle_pair_census(truth: GroundTruth, subset, k: int = 2, users=None) -> PairCensus:
    scores = truth.true_scores(np.asarray(subset))
    if users is not None:
        scores = scores[users]
    return pair_census(scores, subset, k)


# -- binning ------------------------------------------------------------------

@dataclass
class BinnedCurve:
    edges: np.ndarray
    values: np.ndarray
    counts: np.ndarray

    def nonempty(self) -> np.ndarray:
        return self.counts > 0

    def spearman(self) -> float:
        """Rank correlation of bin position against value over nonempty bins."""
        keep = self.nonempty()
        if keep.sum() < 2 or np.ptp(self.values[keep]) == 0:
            return float("nan")
        return float(spearmanr(np.flatnonzero(keep), self.values[keep])[0])

    def to_json(self) -> dict:
        return {"edges": self.edges.tolist(), "values": self.values.tolist(),
                "counts": self.counts.astype(int).tolist()}


def equal_width_edges(values: np.ndarray, bins: int) -> np.ndarray:
    if bins < 1:
        raise AuditError("bins must be >= 1")
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, bins + 1)


def bin_means(x: np.ndarray, y: np.ndarray, bins: int, edges=None) -> BinnedCurve:
    """Per-bin mean of ``y`` over equal-width bins of ``x`` (empty bins -> 0)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    edges = equal_width_edges(x, bins) if edges is None else np.asarray(edges)
    nb = len(edges) - 1
    which = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, nb - 1)
    counts = np.bincount(which, minlength=nb).astype(float)
    sums = np.bincount(which, weights=y, minlength=nb)
    values = np.divide(sums, counts, out=np.zeros(nb), where=counts > 0)
    return BinnedCurve(edges, values, counts)


def pair_similarities(items: EmbeddingSet, pairs: np.ndarray, mode: str = "dot") -> np.ndarray:
    used = np.unique(pairs)
    sim = similarity_matrix(items.matrix[used], mode)
    pos = np.searchsorted(used, pairs)
    return sim[pos[:, 0], pos[:, 1]]


def similarity_binned_counts(census: PairCensus, items: EmbeddingSet, bins: int = DEFAULT_BINS,
                             mode: str = "dot") -> BinnedCurve:
    """Mean co-recommendation count of subset pairs, binned by pair similarity.

    Pairs never recommended together contribute a count of 0.
    """
    pairs = subset_pairs(census.subset)
    return bin_means(pair_similarities(items, pairs, mode), census.pair_counts(pairs), bins)


def pair_accessibility(items: EmbeddingSet, pairs: np.ndarray, ridge: float = 0.0,
                       method: str = "heuristic") -> np.ndarray:
    """Boolean accessibility per pair by ``heuristic``, ``exact`` or ``multi-witness``."""
    pairs = np.asarray(pairs)
    if method == "heuristic":
        return heuristic_margins(items, pairs, ridge) > DEFAULT_TOLERANCE
    if method == "exact":
        def check(pair):
            return joint_accessible(items, tuple(pair)).accessible
        with ThreadPoolExecutor(max_workers()) as pool:
            return np.array(list(pool.map(check, pairs.tolist())), dtype=bool)
    if method == "multi-witness":
        cache: dict = {}
        return np.array([multi_vector_accessible(items, tuple(p), singleton_cache=cache).accessible
                         for p in pairs.tolist()], dtype=bool)
    raise AuditError(f"unknown accessibility method {method!r}")


def binned_heuristic_accessibility(items: EmbeddingSet, subset, bins: int = DEFAULT_BINS,
                                   ridge: float = 0.0, mode: str = "dot",
                                   similarity_items: EmbeddingSet | None = None,
                                   method: str = "heuristic") -> tuple[BinnedCurve, np.ndarray]:
    """Fraction of subset pairs found accessible, binned by pair similarity.

    Accessibility is judged on ``items``; similarity is measured on
    ``similarity_items`` (e.g. ground truth) when given. Returns the curve
    and the per-pair booleans in :func:`subset_pairs` order.
    """
    pairs = subset_pairs(np.asarray(subset))
    flags = pair_accessibility(items, pairs, ridge, method)
    sims = pair_similarities(items if similarity_items is None else similarity_items, pairs, mode)
    return bin_means(sims, flags.astype(float), bins), flags


# -- topics -------------------------------------------------------------------

def assign_topics(vectors: np.ndarray, topic_vectors: np.ndarray) -> np.ndarray:
    """Nearest-anchor (largest inner product) topic for each row."""
    return np.argmax(np.asarray(vectors) @ np.asarray(topic_vectors).T, axis=1)


def topic_pair_matrix(items: EmbeddingSet, topic_labels, ridge: float = 0.0, subset=None,
                      n_topics: int | None = None, flags=None) -> np.ndarray:
    """Symmetric n_topics x n_topics fraction of heuristically accessible pairs.

    Entry (t, t') covers subset pairs with one item in each topic; diagonal
    entries cover within-topic pairs (NaN when a topic has a single item).
    Precomputed per-pair ``flags`` in :func:`subset_pairs` order may be passed.
    """
    labels = np.asarray(topic_labels)
    subset = np.arange(items.n) if subset is None else np.asarray(subset)
    n_topics = int(labels.max()) + 1 if n_topics is None else n_topics
    present = np.bincount(labels[subset], minlength=n_topics)
    if np.any(present == 0):
        raise AuditError(f"topic {int(np.flatnonzero(present == 0)[0])} has no items in the subset")
    pairs = subset_pairs(subset)
    if flags is None:
        flags = pair_accessibility(items, pairs, ridge)
    ta, tb = labels[pairs[:, 0]], labels[pairs[:, 1]]
    lo, hi = np.minimum(ta, tb), np.maximum(ta, tb)
    out = np.full((n_topics, n_topics), np.nan)
    for s in range(n_topics):
        for t in range(s, n_topics):
            sel = (lo == s) & (hi == t)
            if sel.any():
                out[s, t] = out[t, s] = float(np.mean(flags[sel]))
    return out


def _exposure(recs: np.ndarray, labels: np.ndarray, minority: int) -> dict:
    rec_labels = labels[recs]
    mixed = np.any(rec_labels != rec_labels[:, :1], axis=1)
    return {"minority_item_fraction": float(np.mean(rec_labels == minority)),
            "mixed_topic_fraction": float(np.mean(mixed))}


def minority_exposure(model: FactorModel, truth: GroundTruth, subset, k: int = 2,
                      item_labels=None) -> dict:
    """Topic make-up of minority users' top-``k`` lists, model versus oracle.

    ``item_labels`` defaults to the ground-truth topics; otherwise pass labels
    from :func:`assign_topics`.
    """
    if truth.user_minority is None:
        raise AuditError("minority exposure needs a topic world")
    users = np.flatnonzero(truth.user_minority)
    if users.size == 0:
        raise AuditError("no minority users")
    subset = np.asarray(subset)
    labels = truth.item_topics if item_labels is None else np.asarray(item_labels)
    model_recs = subset[top_k_rows(model.user_matrix[users] @ model.item_matrix[subset].T, k)]
    oracle_recs = subset[top_k_rows(truth.true_scores(subset)[users], k)]
    return {"n_minority_users": int(users.size), "k": k,
            "model": _exposure(model_recs, labels, truth.minority_topic),
            "oracle": _exposure(oracle_recs, labels, truth.minority_topic)}


def _mean_pairwise(recs: np.ndarray, sim: np.ndarray) -> np.ndarray:
    k = recs.shape[1]
    total = np.zeros(recs.shape[0])
    for a, b in combinations(range(k), 2):
        total += sim[recs[:, a], recs[:, b]]
    return total / math.comb(k, 2)


def user_diversity_table(truth: GroundTruth, model: FactorModel, subset, k: int = 2,
                         bins: int = DEFAULT_BINS, mode: str = "dot") -> dict:
    """Recommended-set similarity as a function of the user's own interest spread.

    x is the inner product of the user's two true vectors; y is the mean
    pairwise true similarity of the user's recommended items.
    """
    subset = np.asarray(subset)
    users = active_users(model)
    x = np.einsum("ud,ud->u", truth.user_vectors[users, 0], truth.user_vectors[users, 1])
    sim = similarity_matrix(truth.item_vectors.matrix[subset], mode)
    model_recs = top_k_rows(model.user_matrix[users] @ model.item_matrix[subset].T, k)
    oracle_recs = top_k_rows(truth.true_scores(subset)[users], k)
    y_model = _mean_pairwise(model_recs, sim)
    y_oracle = _mean_pairwise(oracle_recs, sim)
    edges = equal_width_edges(x, bins)
    model_curve = bin_means(x, y_model, bins, edges)
    oracle_curve = bin_means(x, y_oracle, bins, edges)
    return {"model": model_curve, "oracle": oracle_curve,
            "model_mean": float(y_model.mean()), "oracle_mean": float(y_oracle.mean())}


# -- exact enumeration --------------------------------------------------------

def exact_inaccessible_sets(items: EmbeddingSet, subset, k: int) -> tuple[int, list[tuple]]:
    """Enumerate every size-``k`` subset set and return (count, inaccessible sets)."""
    sub = items.subset(np.asarray(subset))
    sets = list(combinations(range(sub.n), k))
    def check(s):
        return joint_accessible(sub, s).accessible
    with ThreadPoolExecutor(max_workers()) as pool:
        ok = list(pool.map(check, sets))
    subset = np.asarray(subset)
    return len(sets), [tuple(int(subset[i]) for i in s) for s, a in zip(sets, ok) if not a]


@dataclass
class AuditReport:
    """JSON-ready audit; ``sections`` holds one entry per metric that was run."""

    params: dict
    subset_ids: list
    sections: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"report_version": REPORT_VERSION, "params": self.params,
                "subset": self.subset_ids, **self.sections}
