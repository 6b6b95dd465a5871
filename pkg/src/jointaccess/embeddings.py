"""Item/user embedding containers, CSV IO, normalization and similarity."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

NORM_TOL = 1e-9


class EmbeddingError(ValueError):
    pass


class EmbeddingParseError(EmbeddingError):
    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.line = line


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """``n`` identified item (or user) vectors stored as a read-only n x d matrix."""

    ids: tuple[str, ...]
    matrix: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] < 1 or matrix.shape[1] < 1:
            raise EmbeddingError(f"embedding matrix must be n x d with n, d >= 1, got {matrix.shape}")
        if len(ids) != matrix.shape[0]:
            raise EmbeddingError(f"{len(ids)} ids for {matrix.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise EmbeddingError("duplicate ids")
        if not np.all(np.isfinite(matrix)):
            raise EmbeddingError("embedding matrix contains non-finite entries")
        if self.normalized:
            norms = np.linalg.norm(matrix, axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOL):
                raise EmbeddingError("set flagged normalized but has non-unit rows")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "matrix", _readonly(matrix))

    @classmethod
    def from_matrix(cls, matrix, ids: Sequence[str] | None = None, normalized: bool = False):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim == 1:
            matrix = matrix.reshape(1, -1)
        if ids is None:
            ids = [str(i) for i in range(matrix.shape[0])]
        return cls(tuple(ids), matrix, normalized)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.n

    def index_of(self, item_id: str) -> int:
        try:
            return self.ids.index(item_id)
        except ValueError:
            raise KeyError(item_id) from None

    def subset(self, indices: Sequence[int]) -> "EmbeddingSet":
        idx = list(indices)
        return EmbeddingSet(tuple(self.ids[i] for i in idx), self.matrix[idx], self.normalized)

    def extend(self, other: "EmbeddingSet") -> "EmbeddingSet":
        if other.d != self.d:
            raise EmbeddingError(f"dimension mismatch: {self.d} vs {other.d}")
        return EmbeddingSet(self.ids + other.ids, np.vstack([self.matrix, other.matrix]),
                            self.normalized and other.normalized)


@dataclass(frozen=True, eq=False)
class UserRep:
    """One user as ``m >= 1`` vectors; ``m == 1`` is the single-vector model."""

    vectors: np.ndarray = field()

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim == 1:
            v = v.reshape(1, -1)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise EmbeddingError(f"user vectors must be m x d, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise EmbeddingError("user vectors contain non-finite entries")
        object.__setattr__(self, "vectors", _readonly(v))

    @property
    def m(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


def load_embeddings(path) -> EmbeddingSet:
    """Read ``id,x1,...,xd`` rows (no header). ``d`` comes from the first row."""
    path = Path(path)
    ids: list[str] = []
    rows: list[list[float]] = []
    seen: set[str] = set()
    d = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if d is None:
                d = len(rec) - 1
                if d < 1:
                    raise EmbeddingParseError(path, lineno, "row has no coordinates")
            if len(rec) - 1 != d:
                raise EmbeddingParseError(path, lineno, f"expected {d + 1} columns, got {len(rec)}")
            item_id = rec[0]
            if item_id in seen:
                raise EmbeddingParseError(path, lineno, f"duplicate id {item_id!r}")
            try:
                values = [float(x) for x in rec[1:]]
            except ValueError as exc:
                raise EmbeddingParseError(path, lineno, f"unparseable number ({exc})") from None
            if not all(np.isfinite(values)):
                raise EmbeddingParseError(path, lineno, "non-finite value")
            seen.add(item_id)
            ids.append(item_id)
            rows.append(values)
    if not rows:
        raise EmbeddingParseError(path, None, "no rows")
    return EmbeddingSet(tuple(ids), np.array(rows))


def save_embeddings(embeddings: EmbeddingSet, path) -> None:
    """Write ``embeddings`` in the load format with 17 significant digits."""
    matrix = embeddings.matrix
    if not np.all(np.isfinite(matrix)):
        raise EmbeddingError("refusing to save non-finite entries")
    lines = []
    for item_id, row in zip(embeddings.ids, matrix):
        lines.append(",".join([item_id] + [format(float(x), ".17g") for x in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def normalize_rows(embeddings: EmbeddingSet) -> EmbeddingSet:
    matrix = embeddings.matrix
    norms = np.linalg.norm(matrix, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise EmbeddingError(f"cannot normalize zero vector for id {embeddings.ids[zero[0]]!r}")
    return EmbeddingSet(embeddings.ids, matrix / norms[:, None], normalized=True)


def pair_similarity(embeddings: EmbeddingSet, i: int, j: int, mode: str = "dot") -> float:
    vi, vj = embeddings.matrix[i], embeddings.matrix[j]
    dot = float(vi @ vj)
    if mode == "dot":
        return dot
    if mode != "cosine":
        raise EmbeddingError(f"unknown similarity mode {mode!r}")
    ni, nj = np.linalg.norm(vi), np.linalg.norm(vj)
    if ni == 0.0 or nj == 0.0:
        raise EmbeddingError("cosine similarity undefined for a zero vector")
    return dot / (ni * nj)


def similarity_matrix(matrix: np.ndarray, mode: str = "dot") -> np.ndarray:
    """All-pairs version of :func:`pair_similarity` for a row matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if mode == "dot":
        return matrix @ matrix.T
    if mode != "cosine":
        raise EmbeddingError(f"unknown similarity mode {mode!r}")
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        raise EmbeddingError("cosine similarity undefined for a zero vector")
    unit = matrix / norms[:, None]
    return unit @ unit.T
