"""Explicit-feedback matrix factorization trained by alternating least squares."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import least_squares

_logger = logging.getLogger(__name__)

INIT_SCALE = 0.1
DEFAULT_ITERATIONS = 20


class RatingsError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    """Training produced non-finite factors."""


@dataclass(frozen=True, eq=False)
class RatingDataset:
    """(user, item, rating) triples with declared entity counts.

    ``user_ids``/``item_ids`` map indices back to external identifiers when
    the data came from a file; they default to the decimal index.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    n_users: int
    n_items: int
    user_ids: tuple[str, ...] = field(default=())
    item_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.intp).ravel()
        items = np.asarray(self.items, dtype=np.intp).ravel()
        ratings = np.asarray(self.ratings, dtype=np.float64).ravel()
        if not (users.shape == items.shape == ratings.shape):
            raise RatingsError("users, items and ratings must have equal length")
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise RatingsError("user index out of declared bounds")
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise RatingsError("item index out of declared bounds")
        if not np.all(np.isfinite(ratings)):
            raise RatingsError("ratings contain non-finite values")
        keys = users.astype(np.int64) * self.n_items + items
        if np.unique(keys).size != keys.size:
            raise RatingsError("duplicate (user, item) pair")
        for name, arr in (("users", users), ("items", items), ("ratings", ratings)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.user_ids:
            object.__setattr__(self, "user_ids", tuple(str(i) for i in range(self.n_users)))
        if not self.item_ids:
            object.__setattr__(self, "item_ids", tuple(str(i) for i in range(self.n_items)))
        if len(self.user_ids) != self.n_users or len(self.item_ids) != self.n_items:
            raise RatingsError("id lists must match declared counts")

    @classmethod
    def from_triples(cls, triples, n_users: int | None = None, n_items: int | None = None):
        arr = np.asarray(list(triples), dtype=np.float64).reshape(-1, 3)
        users, items = arr[:, 0].astype(np.intp), arr[:, 1].astype(np.intp)
        n_users = int(users.max()) + 1 if n_users is None else n_users
        n_items = int(items.max()) + 1 if n_items is None else n_items
        return cls(users, items, arr[:, 2], n_users, n_items)

    def __len__(self) -> int:
        return int(self.ratings.size)

    def take(self, mask_or_index) -> "RatingDataset":
        return RatingDataset(self.users[mask_or_index], self.items[mask_or_index],
                             self.ratings[mask_or_index], self.n_users, self.n_items,
                             self.user_ids, self.item_ids)

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items)


def _index(ids: list[str], table: dict[str, int], key: str) -> int:
    idx = table.get(key)
    if idx is None:
        idx = table[key] = len(ids)
        ids.append(key)
    return idx


def _parse_ratings(path, sep: str, min_fields: int, max_fields: int) -> RatingDataset:
    path = Path(path)
    user_ids: list[str] = []
    item_ids: list[str] = []
    utab: dict[str, int] = {}
    itab: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    users, items, ratings = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(sep)
            if not min_fields <= len(parts) <= max_fields:
                raise RatingsError(f"{path}:{lineno}: expected {min_fields} fields, got {len(parts)}")
            try:
                rating = float(parts[2])
            except ValueError:
                raise RatingsError(f"{path}:{lineno}: unparseable rating {parts[2]!r}") from None
            if not math.isfinite(rating):
                raise RatingsError(f"{path}:{lineno}: non-finite rating")
            u = _index(user_ids, utab, parts[0].strip())
            i = _index(item_ids, itab, parts[1].strip())
            if (u, i) in seen:
                raise RatingsError(f"{path}:{lineno}: duplicate rating for ({parts[0]}, {parts[1]})")
            seen.add((u, i))
            users.append(u)
            items.append(i)
            ratings.append(rating)
    if not ratings:
        raise RatingsError(f"{path}: no ratings")
    return RatingDataset(np.array(users), np.array(items), np.array(ratings),
                         len(user_ids), len(item_ids), tuple(user_ids), tuple(item_ids))


def read_ratings_csv(path) -> RatingDataset:
    """``user_id,item_id,rating`` without header; ids indexed by first appearance."""
    return _parse_ratings(path, ",", 3, 3)


def read_movielens(path) -> RatingDataset:
    """MovieLens ``UserID::MovieID::Rating::Timestamp`` (timestamp ignored)."""
    return _parse_ratings(path, "::", 3, 4)


def read_ratings(path, fmt: str = "auto") -> RatingDataset:
    if fmt == "auto":
        path = Path(path)
        if path.suffix == ".dat":
            fmt = "movielens"
        else:
            with open(path, encoding="utf-8") as fh:
                first = fh.readline()
            fmt = "movielens" if "::" in first else "csv"
    if fmt == "movielens":
        return read_movielens(path)
    if fmt == "csv":
        return read_ratings_csv(path)
    raise RatingsError(f"unknown ratings format {fmt!r}")


def write_ratings_csv(data: RatingDataset, path) -> None:
    lines = [f"{data.user_ids[u]},{data.item_ids[i]},{format(float(r), '.17g')}"
             for u, i, r in zip(data.users, data.items, data.ratings)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True, eq=False)
class FactorModel:
    user_matrix: np.ndarray
    item_matrix: np.ndarray
    norm_constrained: bool = False
    history: tuple[dict, ...] = ()

    @property
    def d(self) -> int:
        return self.item_matrix.shape[1]

    def predict(self, users, items) -> np.ndarray:
        return np.einsum("ij,ij->i", self.user_matrix[users], self.item_matrix[items])


def objective(user_matrix, item_matrix, data: RatingDataset, reg: float) -> float:
    """Sum of squared errors plus ``reg`` times the squared Frobenius norms."""
    pred = np.einsum("ij,ij->i", user_matrix[data.users], item_matrix[data.items])
    return float(((data.ratings - pred) ** 2).sum()
                 + reg * ((user_matrix ** 2).sum() + (item_matrix ** 2).sum()))


def _groups(keys: np.ndarray, n: int) -> list[np.ndarray]:
    order = np.argsort(keys, kind="stable")
    bounds = np.searchsorted(keys[order], np.arange(n + 1))
    return [order[bounds[k]:bounds[k + 1]] for k in range(n)]


def _solve_rows(groups, other: np.ndarray, other_index: np.ndarray,
                ratings: np.ndarray, reg: float, out: np.ndarray) -> None:
    for row, idx in enumerate(groups):
        if idx.size == 0:
            out[row] = 0.0
            continue
        out[row] = least_squares(other[other_index[idx]], ratings[idx], reg)


def _project(matrix: np.ndarray) -> None:
    norms = np.linalg.norm(matrix, axis=1)
    live = norms > 0
    matrix[live] /= norms[live, None]


def train_als(data: RatingDataset, d: int, reg: float, iterations: int = DEFAULT_ITERATIONS,
              seed=0, norm_constraint: bool = False) -> FactorModel:
    """Alternating ridge regressions over users then items.

    Each half-step solves every row exactly given the other side, so the
    regularized objective never increases across half-steps. With
    ``norm_constraint`` both sides are projected onto the unit sphere after
    each item pass. Entities with no ratings keep zero vectors.

    ``history`` records the objective after each half-step and the
    projection, plus the training RMSE per iteration.
    """
    if len(data) == 0:
        raise RatingsError("cannot train on an empty dataset")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if d < 1:
        raise ValueError("d must be >= 1")
    if reg < 0:
        raise ValueError("reg must be nonnegative")
    if d >= min(data.n_users, data.n_items):
        warnings.warn(f"d={d} >= min(n_users, n_items); model is over-parameterized",
                      stacklevel=2)
    rng = np.random.default_rng(seed)
    U = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(data.n_users, d))
    V = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(data.n_items, d))
    V[data.item_counts() == 0] = 0.0
    by_user = _groups(data.users, data.n_users)
    by_item = _groups(data.items, data.n_items)

    history = []
    for it in range(iterations):
        _solve_rows(by_user, V, data.items, data.ratings, reg, U)
        after_users = objective(U, V, data, reg)
        _solve_rows(by_item, U, data.users, data.ratings, reg, V)
        after_items = objective(U, V, data, reg)
        entry = {"iteration": it + 1, "objective_after_users": after_users,
                 "objective_after_items": after_items}
        if norm_constraint:
            _project(V)
            _project(U)
            entry["objective_after_projection"] = objective(U, V, data, reg)
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
            raise DivergenceError(f"non-finite factors at iteration {it + 1}")
        model = FactorModel(U, V, norm_constraint)
        entry["train_rmse"] = rmse(model, data)
        history.append(entry)
        _logger.debug("als iteration %d: %s", it + 1, entry)

    U.setflags(write=False)
    V.setflags(write=False)
    return FactorModel(U, V, norm_constraint, tuple(history))


def rmse(model: FactorModel, data: RatingDataset) -> float:
    if len(data) == 0:
        raise RatingsError("rmse of an empty dataset")
    err = data.ratings - model.predict(data.users, data.items)
    return float(np.sqrt(np.mean(err ** 2)))


def fold_assignment(n: int, folds: int, seed) -> np.ndarray:
    """Seeded balanced fold labels for ``n`` triples."""
    rng = np.random.default_rng(seed)
    return rng.permutation(np.arange(n) % folds)


def grid_search_reg(data: RatingDataset, d: int, reg_grid: Sequence[float], folds: int = 10,
                    seed=0, iterations: int = DEFAULT_ITERATIONS,
                    norm_constraint: bool = False) -> tuple[float, dict[float, float]]:
    """k-fold cross-validated choice of ``reg``; ties go to the smaller value.

    Returns the best value and the mean held-out RMSE for every grid entry.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if not reg_grid:
        raise ValueError("reg_grid must be nonempty")
    labels = fold_assignment(len(data), folds, seed)
    for f in range(folds):
        if not np.any(labels == f):
            raise RatingsError(f"fold {f} has no triples")
    scores: dict[float, float] = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for reg in reg_grid:
            errs = []
            for f in range(folds):
                train = data.take(labels != f)
                model = train_als(train, d, reg, iterations, seed, norm_constraint)
                errs.append(rmse(model, data.take(labels == f)))
            scores[float(reg)] = float(np.mean(errs))
    best = min(sorted(scores), key=lambda r: scores[r])
    return best, scores
