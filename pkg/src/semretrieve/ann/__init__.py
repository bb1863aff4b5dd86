"""Serving-side geometry: exact oracle, graph index, quantization, persistence."""

from .artifact import (
    IndexArtifact,
    build_artifact,
    load_index,
    recall_vs_exact,
    retrieve,
    save_index,
)
from .exact import FP32, INT8, VectorStore, exact_knn
from .hnsw import HnswIndex, HnswParams
from .quantize import dequantize_matrix, quantize_int8, quantize_matrix
from .registry import (
    IndexRegistry,
    probe_validator,
    read_registry_file,
    rollback_registry_file,
    swap_registry_file,
)

__all__ = [
    "FP32",
    "INT8",
    "HnswIndex",
    "HnswParams",
    "IndexArtifact",
    "IndexRegistry",
    "VectorStore",
    "build_artifact",
    "dequantize_matrix",
    "exact_knn",
    "load_index",
    "probe_validator",
    "quantize_int8",
    "quantize_matrix",
    "read_registry_file",
    "recall_vs_exact",
    "retrieve",
    "rollback_registry_file",
    "save_index",
    "swap_registry_file",
]
