"""Versioned binary container: JSON header plus checksummed raw array blocks.

Layout: ``magic(4) | schema u32 | header_len u32 | header json | header
checksum u64 | for each block: data_len u64 | raw little-endian bytes |
checksum u64``. Block manifest (name, dtype, shape) lives in the header.
Writes go through a temp file and an atomic replace, so failed writes leave
no partial artifact behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .errors import IndexFormatError


def _digest(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def write_container(path, magic: bytes, schema_version: int, header: dict, blocks) -> None:
    """``blocks`` is an ordered list of (name, ndarray). Arrays are stored little-endian."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    manifest = []
    payloads = []
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append(
            {"name": name, "dtype": arr.dtype.str.replace(">", "<"), "shape": list(arr.shape)}
        )
        payloads.append(raw)
    header = dict(header)
    header["blocks"] = manifest
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = str(path) + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(magic)
            fh.write(struct.pack("<I", schema_version))
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            fh.write(struct.pack("<Q", _digest(header_bytes)))
            for raw in payloads:
                fh.write(struct.pack("<Q", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<Q", _digest(raw)))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path, magic: bytes, schema_version: int):
    """Returns ``(header, {name: ndarray})``; rejects wrong magic, schema, or corruption."""
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise IndexFormatError(f"truncated container: {what} missing in {path}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != magic:
        raise IndexFormatError(f"bad magic in {path}; expected {magic!r}")
    (version,) = struct.unpack("<I", take(4, "schema version"))
    if version != schema_version:
        raise IndexFormatError(
            f"schema version mismatch in {path}: file has {version}, expected {schema_version}"
        )
    (header_len,) = struct.unpack("<I", take(4, "header length"))
    header_bytes = take(header_len, "header")
    (header_sum,) = struct.unpack("<Q", take(8, "header checksum"))
    if _digest(header_bytes) != header_sum:
        raise IndexFormatError(f"header checksum failure in {path}")
    header = json.loads(header_bytes.decode("utf-8"))

    arrays = {}
    for entry in header["blocks"]:
        (length,) = struct.unpack("<Q", take(8, f"length of block {entry['name']}"))
        raw = take(length, f"block {entry['name']}")
        (checksum,) = struct.unpack("<Q", take(8, f"checksum of block {entry['name']}"))
        if _digest(raw) != checksum:
            raise IndexFormatError(f"checksum failure on block {entry['name']!r} in {path}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    if off != len(data):
        raise IndexFormatError(f"trailing bytes in {path}")
    return header, arrays
