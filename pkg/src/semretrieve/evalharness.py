"""Offline k-NN evaluation protocol.

For each held-out (query, geo cell) row, the candidate set is exactly the
geo-eligible documents of the query's vertical; retrieval runs against that
set only, and mean recall@k is aggregated by market and vertical. Ground
truth comes from the generator's latent topic assignments, so recall is
exact. Changing search parameters (e.g. the graph beam width) can change
recall but never the candidate sets.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ann import FP32, INT8, HnswParams, IndexArtifact, VectorStore, exact_knn
from .ann import build_artifact as build_index_artifact
from .ann import quantize_int8, retrieve
from .errors import ConfigError, ContractViolation, VersionMismatchError
from .towers import ModelArtifact, encode_records, truncate_mrl


@dataclass(frozen=True)
class EvalQuery:
    """One evaluation row with its exact relevant set (non-empty)."""

    query_id: str
    market: str
    vertical: str
    geo_cell: int
    positives: tuple

    def __post_init__(self):
        if not self.positives:
            raise ContractViolation(f"eval query {self.query_id} has no positives")


def candidate_index(records) -> dict:
    """(geo_cell, vertical) -> sorted doc ids."""
    index: dict = {}
    for r in records:
        if r.kind == "query":
            continue
        index.setdefault((r.geo_cell, r.kind), []).append(r.id)
    for key in index:
        index[key].sort()
    return index


def build_candidate_set(index: dict, query: EvalQuery) -> list:
    """Deliverable docs of the query's vertical within its geo cell."""
    return index.get((query.geo_cell, query.vertical), [])


def build_eval_set(records, holdout_query_ids=None):
    """Eval rows for queries whose cell/vertical holds at least one topic match.

    Queries with zero eligible positives are excluded and counted in the
    returned coverage dict rather than silently dropped.
    """
    docs_by_key: dict = {}
    for r in records:
        if r.kind != "query":
            docs_by_key.setdefault((r.geo_cell, r.kind, r.latent_topic), []).append(r.id)
    eval_set = []
    skipped = 0
    for r in records:
        if r.kind != "query":
            continue
        if holdout_query_ids is not None and r.id not in holdout_query_ids:
            continue
        positives = docs_by_key.get((r.geo_cell, r.vertical, r.latent_topic), [])
        if not positives:
            skipped += 1
            continue
        eval_set.append(
            EvalQuery(
                query_id=r.id,
                market=r.market,
                vertical=r.vertical,
                geo_cell=r.geo_cell,
                positives=tuple(sorted(positives)),
            )
        )
    return eval_set, {"evaluated": len(eval_set), "skipped_no_positives": skipped}


def recall_at_k(ranked_ids, positives, k: int) -> float:
    """|top-k intersect positives| / |positives|."""
    if k < 1:
        raise ContractViolation(f"k must be at least 1, got {k}")
    positives = set(positives)
    if not positives:
        raise ContractViolation("recall is undefined for an empty positive set")
    top = set(ranked_ids[:k])
    return len(top & positives) / len(positives)


@dataclass
class EvalRunConfig:
    ks: tuple = (20, 200, 500, 2000)
    cut: int = 64
    precision: str = FP32
    search: str = "exact"  # or "hnsw"
    ef_search: int = 128
    hnsw: HnswParams = field(default_factory=HnswParams)
    workers: int = 1

    def __post_init__(self):
        if self.precision not in (FP32, INT8):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.search not in ("exact", "hnsw"):
            raise ConfigError(f"unknown search mode {self.search!r}")
        if any(k < 1 for k in self.ks):
            raise ConfigError("every k must be positive")


class _CellMeans:
    """Streaming single-writer reduction of per-query recalls."""

    def __init__(self):
        self.sums: dict = {}
        self.counts: dict = {}

    def add(self, key, value: float) -> None:
        self.sums[key] = self.sums.get(key, 0.0) + value
        self.counts[key] = self.counts.get(key, 0) + 1

    def cells(self) -> dict:
        return {
            key: {"recall": self.sums[key] / self.counts[key], "n": self.counts[key]}
            for key in self.sums
        }


@dataclass
class EvalReport:
    cells: dict
    overall: dict
    coverage: dict
    metadata: dict

    def recall(self, k: int, market=None, vertical=None) -> float:
        if market is None and vertical is None:
            return self.overall[k]["recall"]
        total = 0.0
        n = 0
        for (m, v, kk), cell in self.cells.items():
            if kk != k:
                continue
            if market is not None and m != market:
                continue
            if vertical is not None and v != vertical:
                continue
            total += cell["recall"] * cell["n"]
            n += cell["n"]
        if n == 0:
            raise ContractViolation(f"no cells match (k={k}, {market}, {vertical})")
        return total / n

    def to_tsv(self) -> str:
        lines = ["market\tvertical\tk\trecall\tn_queries"]
        for (m, v, k) in sorted(self.cells):
            cell = self.cells[(m, v, k)]
            lines.append(f"{m}\t{v}\t{k}\t{cell['recall']:.10f}\t{cell['n']}")
        for k in sorted(self.overall):
            cell = self.overall[k]
            lines.append(f"ALL\tALL\t{k}\t{cell['recall']:.10f}\t{cell['n']}")
        meta = ";".join(f"{key}={self.metadata[key]}" for key in sorted(self.metadata))
        lines.append(f"# coverage evaluated={self.coverage['evaluated']} "
                     f"skipped={self.coverage['skipped_no_positives']}")
        lines.append(f"# {meta}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        width = 10
        markets = sorted({m for (m, _, _) in self.cells})
        ks = sorted({k for (_, _, k) in self.cells})
        verticals = sorted({v for (_, v, _) in self.cells})
        out = []
        for k in ks:
            out.append(f"recall@{k}")
            header = "market".ljust(8) + "".join(v.rjust(width) for v in verticals)
            out.append(header)
            for m in markets:
                row = m.ljust(8)
                for v in verticals:
                    cell = self.cells.get((m, v, k))
                    row += (f"{cell['recall']:.3f}" if cell else "-").rjust(width)
                out.append(row)
            out.append("")
        return "\n".join(out)


def cut_store(doc_ids, doc_vectors_full, cut: int, precision: str, mrl_cuts) -> VectorStore:
    """Derive the serving store at one (cut, precision) from full-width vectors."""
    matrix = truncate_mrl(np.asarray(doc_vectors_full, dtype=np.float32), cut, mrl_cuts)
    store = VectorStore(ids=tuple(doc_ids), matrix=matrix)
    if precision == INT8:
        store = quantize_int8(store)
    return store


def run_protocol(
    model: ModelArtifact,
    doc_ids,
    doc_vectors_full: np.ndarray,
    doc_tte_id: str,
    records,
    eval_set,
    coverage: dict,
    cfg: EvalRunConfig,
) -> EvalReport:
    """Ranked retrieval per candidate set, aggregated by market and vertical.

    Document embeddings must carry the tte id of the query model being
    evaluated; anything else is a protocol violation, not a warning.
    """
    if doc_tte_id != model.tte_id:
        raise VersionMismatchError(
            f"doc embeddings tte {doc_tte_id!r} do not match query model tte {model.tte_id!r}"
        )
    store = cut_store(doc_ids, doc_vectors_full, cfg.cut, cfg.precision, model.mrl_cuts)
    index = candidate_index(records)
    queries = {r.id: r for r in records if r.kind == "query"}
    hasher = model.hasher()
    artifact: IndexArtifact | None = None
    if cfg.search == "hnsw":
        artifact = build_index_artifact(model.tte_id, cfg.cut, store, cfg.hnsw)

    kmax = max(cfg.ks)

    def eval_one(eq: EvalQuery):
        qv_full = encode_records(model.query_tower, hasher, [queries[eq.query_id]])[0]
        qv = truncate_mrl(qv_full, cfg.cut, model.mrl_cuts)
        candidates = build_candidate_set(index, eq)
        if not candidates:
            return eq, None
        k_eff = min(kmax, len(candidates))
        if artifact is not None:
            ranked = retrieve(artifact, qv, k_eff, max(cfg.ef_search, k_eff), candidates)
        else:
            ranked = exact_knn(store, qv, k_eff, candidates)
        ranked_ids = [doc_id for doc_id, _ in ranked]
        return eq, {k: recall_at_k(ranked_ids, eq.positives, k) for k in cfg.ks}

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(eval_one, eval_set))
    else:
        results = [eval_one(eq) for eq in eval_set]

    cells = _CellMeans()
    overall = _CellMeans()
    empty_candidates = 0
    for eq, recalls in results:
        if recalls is None:
            empty_candidates += 1
            continue
        for k, value in recalls.items():
            cells.add((eq.market, eq.vertical, k), value)
            overall.add(k, value)
    coverage = dict(coverage)
    coverage["empty_candidate_sets"] = empty_candidates
    return EvalReport(
        cells=cells.cells(),
        overall=overall.cells(),
        coverage=coverage,
        metadata={
            "tte_id": model.tte_id,
            "cut": cfg.cut,
            "precision": cfg.precision,
            "search": cfg.search,
            "ef_search": cfg.ef_search,
        },
    )


# ---------------------------------------------------------------------------
# efficiency reporting
# ---------------------------------------------------------------------------


def efficiency_report(entries, baseline_label: str) -> list:
    """Byte sizes and ratios relative to a declared baseline.

    ``entries`` is an ordered list of (label, IndexArtifact). Ratios are
    computed from actual byte payloads; the graph overhead is excluded from
    the vector-payload ratio and reported separately.
    """
    by_label = dict(entries)
    if baseline_label not in by_label:
        raise ConfigError(f"baseline {baseline_label!r} missing from entries")
    base = by_label[baseline_label]
    base_payload = base.payload_nbytes()
    base_total = base_payload + base.graph_nbytes()
    rows = []
    for label, artifact in entries:
        payload = artifact.payload_nbytes()
        total = payload + artifact.graph_nbytes()
        rows.append(
            {
                "label": label,
                "cut": artifact.cut,
                "precision": artifact.precision,
                "payload_bytes": payload,
                "graph_bytes": artifact.graph_nbytes(),
                "total_bytes": total,
                "payload_ratio": payload / base_payload,
                "total_ratio": total / base_total,
            }
        )
    return rows


def efficiency_table(rows) -> str:
    header = (
        f"{'config':<20}{'cut':>6}{'type':>6}{'payload':>12}{'graph':>12}"
        f"{'payload_x':>11}{'total_x':>9}"
    )
    lines = [header]
    for row in rows:
        lines.append(
            f"{row['label']:<20}{row['cut']:>6}{row['precision']:>6}"
            f"{row['payload_bytes']:>12}{row['graph_bytes']:>12}"
            f"{row['payload_ratio']:>11.4f}{row['total_ratio']:>9.4f}"
        )
    return "\n".join(lines) + "\n"


def measure_latency(artifact: IndexArtifact, n_probes: int, k: int, ef_search: int,
                    seed: int = 0) -> dict:
    """Wall-clock per-query latency percentiles over random unit probes.

    Timing is inherently non-deterministic; keep it out of byte-compared
    reports.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    probes = rng.normal(size=(n_probes, artifact.store.dim)).astype(np.float32)
    probes /= np.linalg.norm(probes, axis=1, keepdims=True)
    samples = []
    for q in probes:
        t0 = time.perf_counter()
        artifact.hnsw.search(q, k, ef_search)
        samples.append(time.perf_counter() - t0)
    samples.sort()
    return {
        "n": n_probes,
        "p50_ms": 1000.0 * samples[len(samples) // 2],
        "p95_ms": 1000.0 * samples[int(len(samples) * 0.95)],
    }
