"""Inner-product scoring (single and max-over-vectors) and top-K selection."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .embeddings import EmbeddingSet, UserRep

ItemSet = tuple  # strictly increasing tuple of item indices


class RecommendError(ValueError):
    pass


def item_set(indices: Iterable[int], n: int | None = None) -> tuple[int, ...]:
    """Validate and canonicalize a set of item indices to a sorted tuple."""
    idx = sorted(int(i) for i in indices)
    if not idx:
        raise RecommendError("item set must be nonempty")
    if len(set(idx)) != len(idx):
        raise RecommendError(f"duplicate indices in {idx}")
    if idx[0] < 0 or (n is not None and idx[-1] >= n):
        raise RecommendError(f"indices {idx} out of range for {n} items")
    return tuple(idx)


def _matrix(items) -> np.ndarray:
    return items.matrix if isinstance(items, EmbeddingSet) else np.asarray(items, dtype=np.float64)


def _vectors(user) -> np.ndarray:
    return user.vectors if isinstance(user, UserRep) else np.atleast_2d(np.asarray(user, dtype=np.float64))


def score_single(user, items) -> np.ndarray:
    u = _vectors(user)
    if u.shape[0] != 1:
        raise RecommendError(f"score_single expects one user vector, got {u.shape[0]}")
    return score_multi(u, items)


def score_multi(user, items) -> np.ndarray:
    """``s(j) = max_i u_i . v_j`` over the user's vectors."""
    u = _vectors(user)
    v = _matrix(items)
    if u.shape[1] != v.shape[1]:
        raise RecommendError(f"dimension mismatch: user d={u.shape[1]}, items d={v.shape[1]}")
    return (v @ u.T).max(axis=1)


def top_k(scores, k: int) -> tuple[int, ...]:
    """Indices of the ``k`` largest scores, ties going to the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise RecommendError(f"k={k} out of range for {n} items")
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`top_k` for a users x items score matrix; rows sorted ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.shape[1]:
        raise RecommendError(f"k={k} out of range for {scores.shape[1]} items")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def strict_margin(scores, s: Iterable[int]) -> float:
    """``min_{i in s} score_i - max_{j not in s} score_j`` (inf when s is everything)."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.zeros(scores.shape[0], dtype=bool)
    mask[list(s)] = True
    if mask.all():
        return float("inf")
    return float(scores[mask].min() - scores[~mask].max())
