"""Symmetric per-dimension INT8 scalar quantization (zero-point 0).

``scale_d = max |v_d| over the calibration sample / 127``; reconstruction
error is at most ``scale_d / 2`` per dimension for calibration-range inputs.
All-zero dimensions get scale 1 so the zero vector round-trips exactly.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractViolation
from .exact import FP32, INT8, VectorStore


def compute_scales(calibration: np.ndarray) -> np.ndarray:
    calibration = np.asarray(calibration, dtype=np.float32)
    if calibration.size == 0:
        raise ContractViolation("calibration sample must be non-empty")
    peak = np.abs(calibration).max(axis=0)
    scales = peak / np.float32(127.0)
    scales[peak == 0] = 1.0
    return scales.astype(np.float32)


def quantize_matrix(matrix: np.ndarray, scales: np.ndarray) -> np.ndarray:
    codes = np.round(matrix.astype(np.float32) / scales[None, :])
    return np.clip(codes, -127, 127).astype(np.int8)


def dequantize_matrix(codes: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return codes.astype(np.float32) * scales[None, :]


def quantize_int8(store: VectorStore, calibration: np.ndarray | None = None) -> VectorStore:
    """INT8 twin of an FP32 store; payload is one byte per dimension plus scales."""
    if store.precision != FP32:
        raise ContractViolation("quantize_int8 expects an fp32 store")
    if calibration is None:
        calibration = store.matrix
    scales = compute_scales(calibration)
    codes = quantize_matrix(store.matrix, scales)
    return VectorStore(ids=store.ids, matrix=codes, precision=INT8, scales=scales)
