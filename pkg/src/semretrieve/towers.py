"""Unshared query/document encoders over hashed bag-of-token features.

A tower is a stack of layers: a hashed-feature projection, GELU hidden
layers, and an output layer, followed by a fixed L2 normalization so every
emitted embedding is unit length at any prefix cut. Token hashing (rather
than a learned vocabulary) keeps the encoder language-agnostic across the
synthetic languages; structured mode adds (field name, token) composite
features on top of the bare tokens, which is what a plain-text rendering
cannot express.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import tokenize
from .errors import ConfigError, EncodeError
from .storage import read_container, write_container

MODEL_MAGIC = b"SRMA"
MODEL_SCHEMA_VERSION = 1

_META_KEYS = ("kind", "market", "language")
_SKIP_KEYS = ("id", "geo_cell")
_SEP = "\x1f"


@dataclass(frozen=True)
class HasherConfig:
    num_buckets: int = 2**15
    mode: str = "structured"  # or "plain"
    max_tokens: int = 1024

    def __post_init__(self):
        if self.num_buckets < 2 or self.num_buckets & (self.num_buckets - 1):
            raise ConfigError("num_buckets must be a power of two")
        if self.mode not in ("structured", "plain"):
            raise ConfigError(f"unknown hasher mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "num_buckets": self.num_buckets,
            "mode": self.mode,
            "max_tokens": self.max_tokens,
        }


class FeatureHasher:
    """Deterministic signed feature hashing of text blobs.

    Plain mode hashes bare tokens only. Structured mode parses the canonical
    JSON blob and hashes bare tokens plus (field name, token) composites, plus
    composites for the kind/market/language metadata. The resulting sparse
    bag is L2-normalized. Hashes are CRC32-based, so identical across
    processes and platforms (no dependence on PYTHONHASHSEED).
    """

    def __init__(self, config: HasherConfig):
        self.config = config
        self._mask = config.num_buckets - 1

    def features(self, blob: str):
        """Sparse (indices, values) for one blob; indices ascending."""
        keys = self._keys(blob)
        if not keys:
            raise EncodeError("blob produced an empty token set")
        bag: dict[int, float] = {}
        for key in keys:
            raw = key.encode("utf-8")
            h = zlib.crc32(raw)
            bucket = h & self._mask
            sign = 1.0 if zlib.crc32(raw, 0x9E3779B9) & 1 else -1.0
            bag[bucket] = bag.get(bucket, 0.0) + sign
        indices = np.fromiter(sorted(bag.keys()), dtype=np.int64, count=len(bag))
        values = np.asarray([bag[i] for i in indices], dtype=np.float32)
        norm = float(np.sqrt((values.astype(np.float64) ** 2).sum()))
        if norm == 0.0:
            raise EncodeError("all hashed features cancelled out")
        values /= np.float32(norm)
        return indices, values

    def _keys(self, blob: str) -> list[str]:
        limit = self.config.max_tokens
        if self.config.mode == "plain":
            return tokenize(blob)[:limit]
        try:
            payload = json.loads(blob)
            fields = payload["fields"]
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise EncodeError(f"structured mode expects a canonical blob: {exc}") from exc
        keys: list[str] = []
        budget = limit
        for meta in _META_KEYS:
            if meta in payload and budget > 0:
                keys.append(f"{meta}{_SEP}{str(payload[meta]).lower()}")
                budget -= 1
        for name in sorted(fields):
            if budget <= 0:
                break
            toks = tokenize(str(fields[name]))[:budget]
            budget -= len(toks)
            keys.extend(toks)
            keys.extend(f"{name}{_SEP}{tok}" for tok in toks)
        return keys


def batch_features(hasher: FeatureHasher, blobs):
    """Concatenate per-blob sparse features into flat (indices, values, rows)."""
    idx_parts, val_parts, row_parts = [], [], []
    for r, blob in enumerate(blobs):
        idx, val = hasher.features(blob)
        idx_parts.append(idx)
        val_parts.append(val)
        row_parts.append(np.full(idx.shape[0], r, dtype=np.int64))
    return (
        np.concatenate(idx_parts),
        np.concatenate(val_parts),
        np.concatenate(row_parts),
        len(blobs),
    )


# ---------------------------------------------------------------------------
# tower parameters
# ---------------------------------------------------------------------------


@dataclass
class TowerLayer:
    name: str
    weight: Tensor
    bias: Tensor | None
    kind: str  # "hash_proj" | "hidden" | "output" | "head"
    frozen: bool = False

    def tensors(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias


@dataclass
class TowerParams:
    """Layer stack of one tower. Frozen layers receive zero parameter updates."""

    layers: list
    num_buckets: int
    hidden_dim: int
    out_dim: int

    @classmethod
    def create(
        cls,
        seed: int,
        num_buckets: int,
        hidden_dim: int = 128,
        out_dim: int = 64,
        n_hidden: int = 3,
        prefix: str = "tower",
    ) -> "TowerParams":
        rng = np.random.Generator(np.random.PCG64(seed))
        layers = []
        w0 = rng.normal(0.0, 1.0, size=(num_buckets, hidden_dim)).astype(np.float32)
        layers.append(
            TowerLayer(
                name=f"{prefix}.proj",
                weight=Tensor(w0, requires_grad=True, name=f"{prefix}.proj.W"),
                bias=Tensor(
                    np.zeros(hidden_dim, np.float32),
                    requires_grad=True,
                    name=f"{prefix}.proj.b",
                ),
                kind="hash_proj",
            )
        )
        for i in range(n_hidden):
            w = rng.normal(
                0.0, np.sqrt(2.0 / hidden_dim), size=(hidden_dim, hidden_dim)
            ).astype(np.float32)
            layers.append(
                TowerLayer(
                    name=f"{prefix}.hidden{i}",
                    weight=Tensor(w, requires_grad=True, name=f"{prefix}.hidden{i}.W"),
                    bias=Tensor(
                        np.zeros(hidden_dim, np.float32),
                        requires_grad=True,
                        name=f"{prefix}.hidden{i}.b",
                    ),
                    kind="hidden",
                )
            )
        wo = rng.normal(0.0, np.sqrt(1.0 / hidden_dim), size=(hidden_dim, out_dim)).astype(
            np.float32
        )
        layers.append(
            TowerLayer(
                name=f"{prefix}.out",
                weight=Tensor(wo, requires_grad=True, name=f"{prefix}.out.W"),
                bias=Tensor(
                    np.zeros(out_dim, np.float32), requires_grad=True, name=f"{prefix}.out.b"
                ),
                kind="output",
            )
        )
        return cls(
            layers=layers, num_buckets=num_buckets, hidden_dim=hidden_dim, out_dim=out_dim
        )

    def forward(self, tape: Tape, feats) -> Tensor:
        """Encode a feature batch to unit-norm embeddings [n, out_dim]."""
        indices, values, rows, n_rows = feats
        x = None
        for layer in self.layers:
            if layer.kind == "hash_proj":
                x = ad.hashed_embedding_sum(tape, layer.weight, indices, values, rows, n_rows)
                x = ad.add(tape, x, layer.bias)
                x = ad.gelu(tape, x)
            elif layer.kind == "hidden":
                x = ad.matmul(tape, x, layer.weight)
                x = ad.add(tape, x, layer.bias)
                x = ad.gelu(tape, x)
            else:  # output or head: linear
                x = ad.matmul(tape, x, layer.weight)
                x = ad.add(tape, x, layer.bias)
        return ad.l2_normalize(tape, x)

    def copy(self) -> "TowerParams":
        """Deep copy of parameters and frozen flags (training never aliases)."""
        layers = [
            TowerLayer(
                name=l.name,
                weight=Tensor(l.weight.data.copy(), requires_grad=True, name=l.weight.name),
                bias=(
                    Tensor(l.bias.data.copy(), requires_grad=True, name=l.bias.name)
                    if l.bias is not None
                    else None
                ),
                kind=l.kind,
                frozen=l.frozen,
            )
            for l in self.layers
        ]
        return TowerParams(
            layers=layers,
            num_buckets=self.num_buckets,
            hidden_dim=self.hidden_dim,
            out_dim=self.out_dim,
        )

    def trainable_tensors(self):
        for layer in self.layers:
            if not layer.frozen:
                yield from layer.tensors()

    def all_tensors(self):
        for layer in self.layers:
            yield from layer.tensors()

    def checksum(self) -> str:
        """Content hash of all parameter bytes (frozen-layer drift detector)."""
        digest = hashlib.blake2b(digest_size=16)
        for layer in self.layers:
            for t in layer.tensors():
                digest.update(t.name.encode())
                digest.update(np.ascontiguousarray(t.data).tobytes())
        return digest.hexdigest()


def encode_batch(
    tower: TowerParams,
    hasher: FeatureHasher,
    blobs,
    tape: Tape | None = None,
) -> Tensor:
    """Encode text blobs; deterministic for fixed (params, hasher, blob)."""
    feats = batch_features(hasher, blobs)
    return tower.forward(tape if tape is not None else Tape(), feats)


def encode(tower: TowerParams, hasher: FeatureHasher, blob: str) -> np.ndarray:
    """Encode one blob to a unit-norm float32 vector."""
    return encode_batch(tower, hasher, [blob]).data[0]


def record_blob(record, mode: str) -> str:
    """The text rendering a hasher in the given mode consumes."""
    from .corpus import serialize_plain, serialize_structured

    return serialize_structured(record) if mode == "structured" else serialize_plain(record)


def encode_records(tower: TowerParams, hasher: FeatureHasher, records, batch_size: int = 512):
    """Encode records in batches; rows follow input order."""
    blobs = [record_blob(r, hasher.config.mode) for r in records]
    chunks = []
    for lo in range(0, len(blobs), batch_size):
        chunks.append(encode_batch(tower, hasher, blobs[lo : lo + batch_size]).data)
    if not chunks:
        return np.zeros((0, tower.out_dim), np.float32)
    return np.concatenate(chunks, axis=0)


def truncate_mrl(vector: np.ndarray, m: int, cuts) -> np.ndarray:
    """Serving-side prefix cut with re-normalization (identity at full width)."""
    cuts = tuple(cuts)
    if m not in cuts:
        raise ConfigError(f"cut {m} not among declared cuts {cuts}")
    vector = np.asarray(vector)
    if m > vector.shape[-1]:
        raise ConfigError(f"cut {m} exceeds vector width {vector.shape[-1]}")
    if m == vector.shape[-1]:
        return vector
    prefix = vector[..., :m].copy()
    norms = np.sqrt((prefix.astype(np.float64) ** 2).sum(axis=-1, keepdims=True))
    norms = np.maximum(norms, 1e-12)
    return (prefix / norms).astype(vector.dtype)


def freeze_boundary(tower: TowerParams, n_trainable_last_layers: int) -> TowerParams:
    """Mark exactly the last ``n`` layers trainable; everything earlier frozen."""
    n_layers = len(tower.layers)
    if not (1 <= n_trainable_last_layers <= n_layers):
        raise ConfigError(
            f"n_trainable_last_layers must be in [1, {n_layers}], got {n_trainable_last_layers}"
        )
    boundary = n_layers - n_trainable_last_layers
    for i, layer in enumerate(tower.layers):
        layer.frozen = i < boundary
    return tower


def fixed_projection_head(tower: TowerParams, m: int, seed: int = 0) -> TowerParams:
    """Tower variant with a dedicated trainable projection to ``m`` dims.

    With ``m == out_dim`` the head is identity-initialized, so the variant
    reproduces the base encoder's output before any training.
    """
    if m > tower.out_dim:
        raise ConfigError(f"projection width {m} exceeds tower output {tower.out_dim}")
    if m == tower.out_dim:
        w = np.eye(tower.out_dim, dtype=np.float32)
    else:
        rng = np.random.Generator(np.random.PCG64(seed))
        w = rng.normal(0.0, np.sqrt(1.0 / tower.out_dim), size=(tower.out_dim, m)).astype(
            np.float32
        )
    prefix = tower.layers[0].name.split(".")[0]
    head = TowerLayer(
        name=f"{prefix}.fc_head",
        weight=Tensor(w, requires_grad=True, name=f"{prefix}.fc_head.W"),
        bias=Tensor(np.zeros(m, np.float32), requires_grad=True, name=f"{prefix}.fc_head.b"),
        kind="head",
    )
    return TowerParams(
        layers=list(tower.layers) + [head],
        num_buckets=tower.num_buckets,
        hidden_dim=tower.hidden_dim,
        out_dim=m,
    )


# ---------------------------------------------------------------------------
# model artifact
# ---------------------------------------------------------------------------


@dataclass
class ModelArtifact:
    """Versioned pair of towers plus the hasher config and serving cuts.

    The tte id binds the pair; uniqueness comes from content-hashing the
    trained parameters and config, so re-running an identical job reproduces
    identical ids.
    """

    query_model_id: str
    doc_model_id: str
    tte_id: str
    hasher_config: HasherConfig
    query_tower: TowerParams
    doc_tower: TowerParams
    mrl_cuts: tuple
    parent_tte_id: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def out_dim(self) -> int:
        return self.query_tower.out_dim

    def hasher(self) -> FeatureHasher:
        return FeatureHasher(self.hasher_config)

    def save(self, path) -> None:
        header = {
            "query_model_id": self.query_model_id,
            "doc_model_id": self.doc_model_id,
            "tte_id": self.tte_id,
            "parent_tte_id": self.parent_tte_id,
            "hasher": self.hasher_config.to_dict(),
            "mrl_cuts": list(self.mrl_cuts),
            "extra": self.extra,
            "towers": {
                role: _tower_manifest(tower)
                for role, tower in (("query", self.query_tower), ("doc", self.doc_tower))
            },
        }
        blocks = []
        for role, tower in (("query", self.query_tower), ("doc", self.doc_tower)):
            for layer in tower.layers:
                blocks.append((f"{role}.{layer.name}.W", layer.weight.data))
                if layer.bias is not None:
                    blocks.append((f"{role}.{layer.name}.b", layer.bias.data))
        write_container(path, MODEL_MAGIC, MODEL_SCHEMA_VERSION, header, blocks)

    @classmethod
    def load(cls, path) -> "ModelArtifact":
        header, arrays = read_container(path, MODEL_MAGIC, MODEL_SCHEMA_VERSION)
        towers = {}
        for role in ("query", "doc"):
            towers[role] = _tower_from_manifest(header["towers"][role], arrays, role)
        return cls(
            query_model_id=header["query_model_id"],
            doc_model_id=header["doc_model_id"],
            tte_id=header["tte_id"],
            parent_tte_id=header.get("parent_tte_id", ""),
            hasher_config=HasherConfig(**header["hasher"]),
            query_tower=towers["query"],
            doc_tower=towers["doc"],
            mrl_cuts=tuple(header["mrl_cuts"]),
            extra=header.get("extra", {}),
        )


def _tower_manifest(tower: TowerParams) -> dict:
    return {
        "num_buckets": tower.num_buckets,
        "hidden_dim": tower.hidden_dim,
        "out_dim": tower.out_dim,
        "layers": [
            {"name": layer.name, "kind": layer.kind, "frozen": layer.frozen}
            for layer in tower.layers
        ],
    }


def _tower_from_manifest(manifest: dict, arrays: dict, role: str) -> TowerParams:
    layers = []
    for spec in manifest["layers"]:
        name = spec["name"]
        weight = Tensor(
            arrays[f"{role}.{name}.W"].astype(np.float32),
            requires_grad=True,
            name=f"{name}.W",
        )
        bias_key = f"{role}.{name}.b"
        bias = (
            Tensor(arrays[bias_key].astype(np.float32), requires_grad=True, name=f"{name}.b")
            if bias_key in arrays
            else None
        )
        layers.append(
            TowerLayer(
                name=name, weight=weight, bias=bias, kind=spec["kind"], frozen=spec["frozen"]
            )
        )
    return TowerParams(
        layers=layers,
        num_buckets=manifest["num_buckets"],
        hidden_dim=manifest["hidden_dim"],
        out_dim=manifest["out_dim"],
    )


def content_id(prefix: str, *parts) -> str:
    """Deterministic version id: content hash of the given byte/str parts."""
    digest = hashlib.sha256()
    for part in parts:
        if isinstance(part, str):
            part = part.encode("utf-8")
        digest.update(part)
        digest.update(b"\x00")
    return f"{prefix}-{digest.hexdigest()[:12]}"


def tower_bytes(tower: TowerParams) -> bytes:
    chunks = []
    for layer in tower.layers:
        for t in layer.tensors():
            chunks.append(np.ascontiguousarray(t.data).tobytes())
    return b"".join(chunks)
