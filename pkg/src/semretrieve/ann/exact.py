"""Flat vector store and the exact k-NN oracle.

``exact_knn`` is the ground truth every approximate or quantized result is
measured against: full scan, float64 accumulation, descending cosine with
ties broken by lowest id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation, DimensionError

FP32 = "fp32"
INT8 = "int8"


@dataclass
class VectorStore:
    """Doc ids plus their embedding matrix at one declared cut.

    INT8 stores keep symmetric per-dimension scales (zero-point 0) alongside
    the codes; scoring always happens on the dequantized float values.
    """

    ids: tuple
    matrix: np.ndarray
    precision: str = FP32
    scales: np.ndarray | None = None
    _dense: np.ndarray | None = field(default=None, repr=False)
    _id_rank: np.ndarray | None = field(default=None, repr=False)
    _index_of: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.ids = tuple(self.ids)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise DimensionError("matrix must be [n_ids, dim]")
        if self.precision == FP32:
            if self.matrix.dtype != np.float32:
                self.matrix = self.matrix.astype(np.float32)
        elif self.precision == INT8:
            if self.matrix.dtype != np.int8:
                raise DimensionError("int8 store requires int8 codes")
            if self.scales is None or self.scales.shape != (self.matrix.shape[1],):
                raise DimensionError("int8 store requires one scale per dimension")
        else:
            raise ContractViolation(f"unknown precision {self.precision!r}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def dense(self) -> np.ndarray:
        """Float32 view for scoring (dequantized and cached for INT8)."""
        if self.precision == FP32:
            return self.matrix
        if self._dense is None:
            self._dense = self.matrix.astype(np.float32) * self.scales[None, :]
        return self._dense

    def payload_nbytes(self) -> int:
        """Bytes of the vector payload (codes plus scales where applicable)."""
        n = self.matrix.nbytes
        if self.scales is not None:
            n += self.scales.nbytes
        return n

    def id_rank(self) -> np.ndarray:
        """Rank of each row's id in global lexicographic order (tie-break key)."""
        if self._id_rank is None:
            order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
            rank = np.empty(len(self.ids), np.int64)
            for r, i in enumerate(order):
                rank[i] = r
            self._id_rank = rank
        return self._id_rank

    def index_of(self, doc_id: str) -> int:
        if self._index_of is None:
            self._index_of = {doc_id: i for i, doc_id in enumerate(self.ids)}
        return self._index_of[doc_id]

    def top_k(self, q: np.ndarray, k: int, candidate_ids=None):
        return exact_knn(self, q, k, candidate_ids)


def exact_knn(store: VectorStore, q: np.ndarray, k: int, candidate_ids=None):
    """Exact top-k by cosine, descending, ties broken by lowest id.

    ``candidate_ids`` restricts the scan to an eligible subset; an empty
    subset yields an empty result. Scores are accumulated in float64 so the
    ranking is insensitive to summation order.
    """
    if k <= 0:
        raise ContractViolation(f"k must be positive, got {k}")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (store.dim,):
        raise DimensionError(f"query must have dim {store.dim}, got {q.shape}")
    if candidate_ids is None:
        cand_idx = np.arange(len(store.ids))
    else:
        cand_idx = np.asarray([store.index_of(c) for c in candidate_ids], dtype=np.int64)
        if cand_idx.size == 0:
            return []
    scores = store.dense()[cand_idx].astype(np.float64) @ q
    order = np.lexsort((store.id_rank()[cand_idx], -scores))
    top = order[:k]
    return [(store.ids[cand_idx[i]], float(scores[i])) for i in top]
