"""Joint accessibility of item sets under dot-product recommenders."""

__version__ = "0.1.0"

from .accessibility import (  # noqa: E402
    AccessVerdict, heuristic_accessible, joint_accessible, multi_vector_accessible,
    oracle_sample, oracle_sweep_2d, vertex_condition, voronoi_neighbors,
)
from .embeddings import EmbeddingSet, UserRep, load_embeddings, save_embeddings  # noqa: E402
from .recommend import score_multi, score_single, top_k  # noqa: E402

__all__ = [
    "AccessVerdict", "EmbeddingSet", "UserRep", "heuristic_accessible", "joint_accessible",
    "load_embeddings", "multi_vector_accessible", "oracle_sample", "oracle_sweep_2d",
    "save_embeddings", "score_multi", "score_single", "top_k", "vertex_condition",
    "voronoi_neighbors",
]
