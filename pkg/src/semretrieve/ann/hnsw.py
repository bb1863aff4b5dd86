"""Layered navigable small-world index over unit-norm vectors.

Level draws are seeded, insertion order is fixed, and the kernels are
branch-deterministic, so the same (vectors, params) always produce the same
graph and the same search results. Search quality is tuned through
``ef_search``; build quality through ``ef_construction`` and the fanout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ContractViolation, DimensionError
from . import kernels

MAX_LEVELS = 30


@dataclass(frozen=True)
class HnswParams:
    max_links: int = 16
    ef_construction: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.max_links < 2:
            raise ConfigError("max_links must be at least 2")
        if self.ef_construction < self.max_links:
            raise ConfigError("ef_construction must be at least max_links")

    def to_dict(self) -> dict:
        return {
            "max_links": self.max_links,
            "ef_construction": self.ef_construction,
            "seed": self.seed,
        }


def draw_levels(n: int, max_links: int, seed: int) -> np.ndarray:
    """Geometric layer assignment, level_mult = 1/ln(max_links)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    u = rng.random(n)
    levels = np.floor(-np.log(u) / np.log(max_links)).astype(np.int64)
    return np.minimum(levels, MAX_LEVELS)


class HnswIndex:
    def __init__(self, ids, vectors, params, adjacency, counts, entry, top_layer):
        self.ids = tuple(ids)
        self.vectors = vectors
        self.params = params
        self.adjacency = adjacency
        self.counts = counts
        self.entry = int(entry)
        self.top_layer = int(top_layer)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, ids, vectors, params: HnswParams = HnswParams()) -> "HnswIndex":
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] == 0:
            raise DimensionError("need a non-empty [n, dim] vector matrix")
        if len(ids) != vectors.shape[0]:
            raise DimensionError("one id per vector required")
        levels = draw_levels(vectors.shape[0], params.max_links, params.seed)
        if vectors.shape[0] == 1:
            n_layers = int(levels[0]) + 1
            adjacency = np.full((n_layers, 1, 2 * params.max_links), -1, np.int64)
            counts = np.zeros((n_layers, 1), np.int64)
            return cls(ids, vectors, params, adjacency, counts, 0, int(levels[0]))
        adjacency, counts, entry, top = kernels.build_graph(
            vectors, levels, params.max_links, params.ef_construction
        )
        return cls(ids, vectors, params, adjacency, counts, entry, top)

    def search(self, q: np.ndarray, k: int, ef_search: int, allowed_ids=None):
        """Top-k (id, cosine) pairs, descending score, ties broken by lowest id.

        ``allowed_ids`` restricts results (not traversal) to a membership set.
        """
        if k <= 0:
            raise ContractViolation(f"k must be positive, got {k}")
        if ef_search < k:
            raise ContractViolation(
                f"ef_search ({ef_search}) must be at least k ({k})"
            )
        q = np.ascontiguousarray(q, dtype=np.float32)
        if q.shape != (self.vectors.shape[1],):
            raise DimensionError(
                f"query must have dim {self.vectors.shape[1]}, got {q.shape}"
            )
        if allowed_ids is None:
            mask = kernels.EMPTY_MASK
        else:
            mask = np.zeros(len(self.ids), np.uint8)
            for doc_id in allowed_ids:
                mask[self._index_of(doc_id)] = 1
        dists, nodes = kernels.search_graph(
            self.vectors,
            self.adjacency,
            self.counts,
            self.entry,
            self.top_layer,
            q,
            ef_search,
            mask,
        )
        hits = sorted(
            ((float(d), self.ids[int(i)]) for d, i in zip(dists, nodes)),
            key=lambda pair: (pair[0], pair[1]),
        )
        return [(doc_id, 1.0 - d) for d, doc_id in hits[:k]]

    def _index_of(self, doc_id: str) -> int:
        if not hasattr(self, "_id_index"):
            self._id_index = {d: i for i, d in enumerate(self.ids)}
        return self._id_index[doc_id]

    def graph_nbytes(self) -> int:
        return self.adjacency.nbytes + self.counts.nbytes

    def layer0_connected(self) -> bool:
        """BFS reachability of every node from the entry point at layer 0."""
        n = len(self.ids)
        seen = np.zeros(n, bool)
        stack = [self.entry]
        seen[self.entry] = True
        while stack:
            node = stack.pop()
            for t in range(self.counts[0, node]):
                nb = int(self.adjacency[0, node, t])
                if not seen[nb]:
                    seen[nb] = True
                    stack.append(nb)
        return bool(seen.all())
