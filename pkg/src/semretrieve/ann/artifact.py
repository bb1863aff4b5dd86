"""Persisted index artifact: fixed-width header, graph blob, vector blob.

Layout: ``magic | schema u32 | index_id 32s | tte_id 32s | cut u32 |
precision u8 | metric u8 | max_links u32 | ef_construction u32 | seed i64 |
doc_count u64 | n_layers u32 | top_layer u32 | entry u64`` followed by
length-prefixed blobs (id table, layer counts, adjacency, vectors, scales),
each trailed by a 64-bit checksum. Numeric header fields are little-endian;
id strings are NUL-padded UTF-8. A load of a save reproduces identical
search results for any query.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import IndexFormatError
from .exact import FP32, INT8, VectorStore, exact_knn
from .hnsw import HnswIndex, HnswParams

INDEX_MAGIC = b"SRIX"
INDEX_SCHEMA_VERSION = 1

_HEADER = struct.Struct("<4sI32s32sIBBIIqQIIQ")
_PRECISION_CODE = {FP32: 0, INT8: 1}
_PRECISION_NAME = {v: k for k, v in _PRECISION_CODE.items()}
METRIC_COSINE = 0


def _digest(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _pad_id(value: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 32:
        raise IndexFormatError(f"id {value!r} exceeds 32 bytes")
    return raw.ljust(32, b"\x00")


@dataclass
class IndexArtifact:
    """One servable index: graph + payload + identity/version header."""

    index_id: str
    tte_id: str
    cut: int
    store: VectorStore
    hnsw: HnswIndex

    @property
    def precision(self) -> str:
        return self.store.precision

    @property
    def params(self) -> HnswParams:
        return self.hnsw.params

    def payload_nbytes(self) -> int:
        return self.store.payload_nbytes()

    def graph_nbytes(self) -> int:
        return self.hnsw.graph_nbytes()


def build_artifact(tte_id: str, cut: int, store: VectorStore, params: HnswParams) -> IndexArtifact:
    """Build the graph over the store's (dequantized) payload and stamp ids."""
    hnsw = HnswIndex.build(store.ids, store.dense(), params)
    digest = hashlib.sha256()
    digest.update(tte_id.encode())
    digest.update(struct.pack("<IIIq", cut, params.max_links, params.ef_construction, params.seed))
    digest.update(store.precision.encode())
    digest.update(np.ascontiguousarray(store.matrix).tobytes())
    index_id = f"ix-{digest.hexdigest()[:12]}"
    return IndexArtifact(index_id=index_id, tte_id=tte_id, cut=cut, store=store, hnsw=hnsw)


def save_index(artifact: IndexArtifact, path) -> None:
    store = artifact.store
    hnsw = artifact.hnsw
    header = _HEADER.pack(
        INDEX_MAGIC,
        INDEX_SCHEMA_VERSION,
        _pad_id(artifact.index_id),
        _pad_id(artifact.tte_id),
        artifact.cut,
        _PRECISION_CODE[store.precision],
        METRIC_COSINE,
        hnsw.params.max_links,
        hnsw.params.ef_construction,
        hnsw.params.seed,
        len(store.ids),
        hnsw.adjacency.shape[0],
        hnsw.top_layer,
        hnsw.entry,
    )
    blobs = [
        "\n".join(store.ids).encode("utf-8"),
        np.ascontiguousarray(hnsw.counts.astype("<i4")).tobytes(),
        np.ascontiguousarray(hnsw.adjacency.astype("<i4")).tobytes(),
        np.ascontiguousarray(
            store.matrix.astype("<f4") if store.precision == FP32 else store.matrix
        ).tobytes(),
        b"" if store.scales is None else np.ascontiguousarray(store.scales.astype("<f4")).tobytes(),
    ]
    tmp = str(path) + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(header)
            for blob in blobs:
                fh.write(struct.pack("<Q", len(blob)))
                fh.write(blob)
                fh.write(struct.pack("<Q", _digest(blob)))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_index(path) -> IndexArtifact:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise IndexFormatError(f"truncated header in {path}")
    (
        magic,
        schema,
        index_id,
        tte_id,
        cut,
        precision_code,
        metric,
        max_links,
        ef_construction,
        seed,
        doc_count,
        n_layers,
        top_layer,
        entry,
    ) = _HEADER.unpack_from(data, 0)
    if magic != INDEX_MAGIC:
        raise IndexFormatError(f"bad magic in {path}")
    if schema != INDEX_SCHEMA_VERSION:
        raise IndexFormatError(
            f"index schema mismatch in {path}: file has {schema}, expected {INDEX_SCHEMA_VERSION}"
        )
    if metric != METRIC_COSINE:
        raise IndexFormatError(f"unknown metric code {metric}")
    if precision_code not in _PRECISION_NAME:
        raise IndexFormatError(f"unknown precision code {precision_code}")

    off = _HEADER.size
    blobs = []
    for what in ("id table", "counts", "adjacency", "vectors", "scales"):
        if off + 8 > len(data):
            raise IndexFormatError(f"truncated {what} length in {path}")
        (length,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + length + 8 > len(data):
            raise IndexFormatError(f"truncated {what} blob in {path}")
        blob = data[off : off + length]
        off += length
        (checksum,) = struct.unpack_from("<Q", data, off)
        off += 8
        if _digest(blob) != checksum:
            raise IndexFormatError(f"checksum failure on {what} in {path}")
        blobs.append(blob)
    if off != len(data):
        raise IndexFormatError(f"trailing bytes in {path}")

    ids = tuple(blobs[0].decode("utf-8").split("\n")) if blobs[0] else ()
    if len(ids) != doc_count:
        raise IndexFormatError(f"id table count mismatch in {path}")
    counts = np.frombuffer(blobs[1], dtype="<i4").reshape(n_layers, doc_count).astype(np.int64)
    cap0 = 2 * max_links
    adjacency = (
        np.frombuffer(blobs[2], dtype="<i4")
        .reshape(n_layers, doc_count, cap0)
        .astype(np.int64)
    )
    precision = _PRECISION_NAME[precision_code]
    if precision == FP32:
        matrix = np.frombuffer(blobs[3], dtype="<f4").reshape(doc_count, cut).astype(np.float32)
        scales = None
    else:
        matrix = np.frombuffer(blobs[3], dtype=np.int8).reshape(doc_count, cut).copy()
        scales = np.frombuffer(blobs[4], dtype="<f4").astype(np.float32)
    store = VectorStore(ids=ids, matrix=matrix, precision=precision, scales=scales)
    params = HnswParams(max_links=max_links, ef_construction=ef_construction, seed=seed)
    hnsw = HnswIndex(ids, store.dense(), params, adjacency, counts, entry, top_layer)
    return IndexArtifact(
        index_id=index_id.rstrip(b"\x00").decode("utf-8"),
        tte_id=tte_id.rstrip(b"\x00").decode("utf-8"),
        cut=cut,
        store=store,
        hnsw=hnsw,
    )


def retrieve(artifact: IndexArtifact, q: np.ndarray, k: int, ef_search: int, candidate_ids=None):
    """Serving-side search with the small-subset pre-filter rule.

    When an eligibility subset smaller than ``2k`` is given, an exact scan of
    the subset is cheaper and more faithful than graph traversal; larger
    subsets go through filtered graph search.
    """
    if candidate_ids is not None:
        candidate_ids = list(candidate_ids)
        if len(candidate_ids) < 2 * k:
            return exact_knn(artifact.store, q, k, candidate_ids)
        return artifact.hnsw.search(q, k, ef_search, allowed_ids=candidate_ids)
    return artifact.hnsw.search(q, k, ef_search)


def recall_vs_exact(artifact: IndexArtifact, probes: np.ndarray, k: int, ef_search: int) -> float:
    """Mean overlap of graph search vs the exact oracle over probe queries."""
    total = 0.0
    for q in probes:
        approx = {doc_id for doc_id, _ in artifact.hnsw.search(q, k, ef_search)}
        exact = {doc_id for doc_id, _ in exact_knn(artifact.store, q, k)}
        if exact:
            total += len(approx & exact) / len(exact)
    return total / len(probes) if len(probes) else 0.0
