"""Joint-accessibility tests for top-K inner-product recommenders.

Exact verdicts come from strict LP feasibility (:mod:`jointaccess.numerics`):

* ``joint_accessible``: every in-set item strictly beats every outsider.
* ``vertex_condition``: the in-set vector sum strictly beats every other
  size-K sum, i.e. it is a vertex of the hull of all size-K sums.
* ``voronoi_neighbors``: for unit vectors, the pair's Voronoi cells on the
  sphere share a boundary point.

``oracle_sweep_2d`` is an independent exact check for d = 2, ``oracle_sample``
a sound-only random search, and ``heuristic_accessible`` the least-squares
user construction used by the audits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .embeddings import EmbeddingSet, UserRep, NORM_TOL
from .numerics import DEFAULT_TOLERANCE, least_squares, lp_strict_feasible
from .recommend import item_set, score_multi, strict_margin, top_k

ENUMERATION_LIMIT = 200_000
SWEEP_ANGLE_TOL = 1e-12

METHODS = (
    "dominance-lp", "vertex-lp", "voronoi", "heuristic-ls",
    "oracle-sweep", "oracle-sample", "multi-witness",
)
INCONCLUSIVE = "oracle-sample:inconclusive"


class AccessibilityError(ValueError):
    pass


@dataclass(frozen=True)
class AccessVerdict:
    accessible: bool
    witness: UserRep | None
    method: str
    margin: float

    @property
    def conclusive(self) -> bool:
        return self.method != INCONCLUSIVE


def _check_set(items: EmbeddingSet, s) -> tuple[int, ...]:
    s = item_set(s, items.n)
    if len(s) >= items.n:
        raise AccessibilityError(f"set size {len(s)} must be smaller than n={items.n}")
    return s


def dominance_rows(matrix: np.ndarray, s: Sequence[int]) -> np.ndarray:
    """Rows ``v_i - v_j`` for every ``i`` in ``s`` and ``j`` outside it."""
    inside = np.zeros(matrix.shape[0], dtype=bool)
    inside[list(s)] = True
    outside = matrix[~inside]
    return (matrix[inside][:, None, :] - outside[None, :, :]).reshape(-1, matrix.shape[1])


def joint_accessible(items: EmbeddingSet, s, tolerance: float = DEFAULT_TOLERANCE) -> AccessVerdict:
    """Exact test: does some single user vector rank exactly ``s`` as its top-K?

    The top-K set by score is precisely the set whose every member beats every
    outsider, so the test is strict feasibility of K(n-K) dominance rows.
    """
    s = _check_set(items, s)
    result = lp_strict_feasible(dominance_rows(items.matrix, s), tolerance)
    witness = UserRep(result.witness) if result.feasible else None
    return AccessVerdict(result.feasible, witness, "dominance-lp", result.margin)


def set_sums(matrix: np.ndarray, k: int) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """All size-``k`` index sets (lexicographic) and their vector sums."""
    n = matrix.shape[0]
    count = math.comb(n, k)
    if count > ENUMERATION_LIMIT:
        raise AccessibilityError(
            f"C({n},{k}) = {count} candidate sets exceeds {ENUMERATION_LIMIT}; use joint_accessible")
    sets = list(combinations(range(n), k))
    idx = np.array(sets, dtype=np.intp).reshape(len(sets), k)
    return sets, matrix[idx].sum(axis=1)


def vertex_condition(items: EmbeddingSet, s, tolerance: float = DEFAULT_TOLERANCE) -> AccessVerdict:
    """Exact test via the hull of all size-K sums: the target sum must be a vertex."""
    s = _check_set(items, s)
    sets, sums = set_sums(items.matrix, len(s))
    target = sets.index(s)
    rows = sums[target] - np.delete(sums, target, axis=0)
    result = lp_strict_feasible(rows, tolerance)
    witness = UserRep(result.witness) if result.feasible else None
    return AccessVerdict(result.feasible, witness, "vertex-lp", result.margin)


def _is_unit(items: EmbeddingSet) -> bool:
    return items.normalized or bool(
        np.all(np.abs(np.linalg.norm(items.matrix, axis=1) - 1.0) <= NORM_TOL))


def voronoi_neighbors(items: EmbeddingSet, i: int, j: int,
                      tolerance: float = DEFAULT_TOLERANCE) -> AccessVerdict:
    """Do the spherical Voronoi cells of unit items ``i`` and ``j`` touch?

    Searches the bisector hyperplane ``(v_i - v_j) . u = 0``, parameterized by
    an orthonormal basis ``N`` of it (``u = N z``), for a point where both
    items strictly beat every other item.
    """
    if not _is_unit(items):
        raise AccessibilityError("voronoi_neighbors requires unit-norm item vectors")
    n = items.n
    if i == j or not (0 <= i < n and 0 <= j < n):
        raise AccessibilityError(f"invalid item pair ({i}, {j}) for n={n}")
    V = items.matrix
    normal = V[i] - V[j]
    if not np.any(normal):
        raise AccessibilityError(f"items {i} and {j} coincide")
    _, _, vt = np.linalg.svd(normal[None, :])
    basis = vt[1:].T
    others = [k for k in range(n) if k not in (i, j)]
    if not others or basis.shape[1] == 0:
        u = basis[:, 0] if basis.shape[1] else np.zeros(items.d)
        if not others:
            return AccessVerdict(True, UserRep(u), "voronoi", float("inf"))
        return AccessVerdict(False, None, "voronoi", 0.0)
    rows = (V[i] - V[others]) @ basis
    result = lp_strict_feasible(rows, tolerance)
    witness = UserRep(basis @ result.witness) if result.feasible else None
    return AccessVerdict(result.feasible, witness, "voronoi", result.margin)


def indicator(n: int, s: Iterable[int]) -> np.ndarray:
    r = np.zeros(n)
    r[list(s)] = 1.0
    return r


def heuristic_user(items: EmbeddingSet, s, ridge: float = 0.0) -> UserRep:
    """Least-squares user that rates ``s`` at 1 and every other item at 0."""
    s = item_set(s, items.n)
    return UserRep(least_squares(items.matrix, indicator(items.n, s), ridge))


def heuristic_accessible(items: EmbeddingSet, s, ridge: float = 0.0,
                         tolerance: float = DEFAULT_TOLERANCE) -> AccessVerdict:
    """Check whether the least-squares user actually gets ``s`` as its top-K.

    Sound (a positive verdict carries a witness) but incomplete: a negative
    verdict only means this particular user failed.
    """
    s = item_set(s, items.n)
    user = heuristic_user(items, s, ridge)
    scores = score_multi(user, items)
    margin = strict_margin(scores, s)
    ok = top_k(scores, len(s)) == s and margin > tolerance
    return AccessVerdict(ok, user if ok else None, "heuristic-ls", margin)


def heuristic_margins(items: EmbeddingSet, sets: np.ndarray, ridge: float = 0.0,
                      chunk: int = 2048) -> np.ndarray:
    """Vectorized :func:`heuristic_accessible` margins for many sets at once.

    ``sets`` is an (N, K) index array. Uses linearity of the least-squares
    solution in the right-hand side: the user for ``s`` is the sum of the
    solutions for each unit indicator.
    """
    V = items.matrix
    n = V.shape[0]
    sets = np.asarray(sets, dtype=np.intp)
    solutions = least_squares(V, np.eye(n), ridge)  # d x n
    all_scores = V @ solutions  # n x n, column l = scores for indicator of item l
    margins = np.empty(sets.shape[0])
    for start in range(0, sets.shape[0], chunk):
        block = sets[start:start + chunk]
        scores = all_scores[:, block].sum(axis=2)  # n x B
        cols = np.arange(block.shape[0])
        inside = scores[block.T, cols].min(axis=0)
        masked = scores.copy()
        masked[block.T, cols] = -np.inf
        margins[start:start + chunk] = inside - masked.max(axis=0)
    return margins


def _sweep_directions(matrix: np.ndarray) -> np.ndarray:
    """Midpoints of the arcs between consecutive score-tie angles (2 x A)."""
    n = matrix.shape[0]
    a, b = np.triu_indices(n, 1)
    diff = matrix[a] - matrix[b]
    diff = diff[np.any(diff != 0.0, axis=1)]
    if diff.shape[0] == 0:
        return np.array([[1.0], [0.0]])
    base = np.arctan2(diff[:, 1], diff[:, 0])
    angles = np.mod(np.concatenate([base + np.pi / 2, base - np.pi / 2]), 2 * np.pi)
    angles = np.sort(angles)
    keep = np.concatenate([[True], np.diff(angles) > SWEEP_ANGLE_TOL])
    angles = angles[keep]
    nxt = np.concatenate([angles[1:], [angles[0] + 2 * np.pi]])
    mids = (angles + nxt) / 2
    return np.vstack([np.cos(mids), np.sin(mids)])


def oracle_sweep_2d(items: EmbeddingSet, s, tolerance: float = SWEEP_ANGLE_TOL) -> AccessVerdict:
    """Exact d = 2 check by sweeping user directions around the unit circle.

    Top-K membership can only change at angles where two items tie, so one
    probe per open arc between consecutive tie angles covers every ranking.
    """
    if items.d != 2:
        raise AccessibilityError(f"oracle_sweep_2d needs d=2, got d={items.d}")
    s = _check_set(items, s)
    dirs = _sweep_directions(items.matrix)
    scores = items.matrix @ dirs
    inside = np.zeros(items.n, dtype=bool)
    inside[list(s)] = True
    margins = scores[inside].min(axis=0) - scores[~inside].max(axis=0)
    best = int(np.argmax(margins))
    if margins[best] > tolerance:
        return AccessVerdict(True, UserRep(dirs[:, best]), "oracle-sweep", float(margins[best]))
    return AccessVerdict(False, None, "oracle-sweep", float(margins[best]))


def sweep_accessible_sets_2d(items: EmbeddingSet, k: int,
                             tolerance: float = SWEEP_ANGLE_TOL) -> set[tuple[int, ...]]:
    """Every size-``k`` set some direction strictly ranks on top (d = 2)."""
    if items.d != 2:
        raise AccessibilityError(f"needs d=2, got d={items.d}")
    scores = items.matrix @ _sweep_directions(items.matrix)
    found = set()
    for col in scores.T:
        order = np.argsort(-col, kind="stable")
        if k < items.n and col[order[k - 1]] - col[order[k]] <= tolerance:
            continue
        found.add(tuple(sorted(int(i) for i in order[:k])))
    return found


def oracle_sample(items: EmbeddingSet, s, samples: int, seed,
                  tolerance: float = DEFAULT_TOLERANCE, chunk: int = 4096) -> AccessVerdict:
    """Random search over unit user vectors; only a positive answer is conclusive."""
    if samples < 1:
        raise AccessibilityError("samples must be >= 1")
    s = _check_set(items, s)
    rng = np.random.default_rng(seed)
    inside = np.zeros(items.n, dtype=bool)
    inside[list(s)] = True
    best = -np.inf
    drawn = 0
    while drawn < samples:
        size = min(chunk, samples - drawn)
        users = rng.standard_normal((size, items.d))
        users /= np.linalg.norm(users, axis=1, keepdims=True)
        scores = items.matrix @ users.T
        margins = scores[inside].min(axis=0) - scores[~inside].max(axis=0)
        hit = np.flatnonzero(margins > tolerance)
        if hit.size:
            h = int(hit[0])
            return AccessVerdict(True, UserRep(users[h]), "oracle-sample", float(margins[h]))
        best = max(best, float(margins.max()))
        drawn += size
    return AccessVerdict(False, None, INCONCLUSIVE, best)


def positive_singleton_witness(items: EmbeddingSet, i: int,
                               tolerance: float = DEFAULT_TOLERANCE) -> np.ndarray:
    """A user vector ranking item ``i`` strictly first with ``u . v_i > 0``.

    The plain singleton LP witness is used when its own score is positive;
    otherwise the LP is re-solved with the extra row ``v_i``.
    """
    item_id = items.ids[i]
    verdict = joint_accessible(items, (i,), tolerance)
    if not verdict.accessible:
        raise AccessibilityError(f"item {item_id!r} is not individually accessible")
    u = verdict.witness.vectors[0]
    if u @ items.matrix[i] > tolerance:
        return u
    rows = np.vstack([dominance_rows(items.matrix, (i,)), items.matrix[i]])
    result = lp_strict_feasible(rows, tolerance)
    if not result.feasible:
        raise AccessibilityError(
            f"item {item_id!r} is accessible only with non-positive scores; "
            "the rescaling construction cannot use it")
    return result.witness


def multi_vector_witness(items: EmbeddingSet, s, tolerance: float = DEFAULT_TOLERANCE,
                         singleton_cache: dict | None = None) -> UserRep:
    """Build a K-vector user whose max-score top-K is exactly ``s``.

    Each member's singleton witness is rescaled so that its own item scores
    exactly 1; every outsider then scores below 1 under every vector.
    ``singleton_cache`` (item index -> witness) lets callers share LP solves
    across many sets.
    """
    s = _check_set(items, s)
    vectors = []
    for i in s:
        if singleton_cache is not None and i in singleton_cache:
            u = singleton_cache[i]
        else:
            u = positive_singleton_witness(items, i, tolerance)
            if singleton_cache is not None:
                singleton_cache[i] = u
        vectors.append(u / (u @ items.matrix[i]))
    user = UserRep(np.array(vectors))
    scores = score_multi(user, items)
    if top_k(scores, len(s)) != s or strict_margin(scores, s) <= 0.0:
        raise AccessibilityError(f"multi-vector witness failed re-scoring for set {s}")
    return user


def multi_vector_accessible(items: EmbeddingSet, s, tolerance: float = DEFAULT_TOLERANCE,
                            singleton_cache: dict | None = None) -> AccessVerdict:
    """Verdict wrapper: inaccessible (no witness) when the construction is unavailable."""
    try:
        user = multi_vector_witness(items, s, tolerance, singleton_cache)
    except AccessibilityError:
        return AccessVerdict(False, None, "multi-witness", float("nan"))
    margin = strict_margin(score_multi(user, items), item_set(s))
    return AccessVerdict(True, user, "multi-witness", margin)


def monotone_violation_extend(items: EmbeddingSet, s, extra,
                              tolerance: float = DEFAULT_TOLERANCE) -> AccessVerdict:
    """Verdict for ``s`` after appending ``extra`` items to an inaccessible instance.

    ``extra`` is an EmbeddingSet, a (m, d) array, or None/empty for no change.
    """
    if joint_accessible(items, s, tolerance).accessible:
        raise AccessibilityError("set must be inaccessible before extension")
    if extra is None or (not isinstance(extra, EmbeddingSet) and np.asarray(extra).size == 0):
        return joint_accessible(items, s, tolerance)
    if not isinstance(extra, EmbeddingSet):
        extra = np.atleast_2d(np.asarray(extra, dtype=np.float64))
        ids = [f"extra-{k}" for k in range(extra.shape[0])]
        extra = EmbeddingSet.from_matrix(extra, ids)
    return joint_accessible(items.extend(extra), s, tolerance)
