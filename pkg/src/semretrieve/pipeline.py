"""End-to-end lifecycle plumbing: generate, train, embed, index, eval, report.

Every step is idempotent in deterministic mode: re-running a step with the
same config and inputs rewrites byte-identical outputs. Version ids chain
through the steps (corpus fingerprint -> tte id -> index ids -> reports) and
any mismatch along the chain is a hard error, not a warning. Timing numbers
are written to a separate sidecar so the comparable artifacts stay
deterministic.
"""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from dataclasses import dataclass

import numpy as np

from . import corpus as corpus_mod
from .ann import HnswParams, build_artifact, load_index, recall_vs_exact, save_index
from .errors import ConfigError, GuardrailError, VersionMismatchError
from .evalharness import (
    EvalRunConfig,
    build_eval_set,
    cut_store,
    efficiency_report,
    efficiency_table,
    measure_latency,
    run_protocol,
)
from .storage import read_container, write_container
from .towers import ModelArtifact, encode_records
from .trainer import (
    ModelBuildConfig,
    TrainConfig,
    TrainData,
    train_stage1,
    train_stage2,
)

EMBED_MAGIC = b"SREM"
EMBED_SCHEMA_VERSION = 1

PIPELINE_SCHEMA = 1


@dataclass
class PipelineConfig:
    """One config file drives the whole lifecycle; see ``default_config``."""

    raw: dict
    path: str = ""

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        cfg = cls(raw=raw, path=str(path))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.raw.get("schema") != PIPELINE_SCHEMA:
            raise ConfigError(
                f"config schema must be {PIPELINE_SCHEMA}, got {self.raw.get('schema')!r}"
            )
        for key in ("seed", "corpus", "model", "stage1", "stage2", "index", "eval"):
            if key not in self.raw:
                raise ConfigError(f"config missing section {key!r}")

    def dump(self, path) -> None:
        tmp = str(path) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.raw, fh, sort_keys=True, indent=2)
            fh.write("\n")
        os.replace(tmp, path)

    # section accessors -----------------------------------------------------
    def corpus_spec(self) -> corpus_mod.CorpusSpec:
        section = dict(self.raw["corpus"])
        section.setdefault("seed", self.raw["seed"])
        return corpus_mod.CorpusSpec.from_dict(section)

    def build_config(self) -> ModelBuildConfig:
        return ModelBuildConfig.from_dict(self.raw["model"])

    def train_config(self, stage: str) -> TrainConfig:
        return TrainConfig.from_dict(self.raw[stage])

    def mining(self) -> dict:
        return dict(self.raw.get("mining", {}))

    def holdout(self) -> tuple:
        return (
            float(self.raw.get("holdout_fraction", 0.4)),
            int(self.raw.get("holdout_seed", 1)),
        )


def default_config(seed: int = 7, docs_per_vertical: int = 1000) -> dict:
    return {
        "schema": PIPELINE_SCHEMA,
        "seed": seed,
        "corpus": {
            "docs_per_vertical": docs_per_vertical,
            "queries_per_market": 40,
            "cells_per_market": 2,
            "topics_per_market": 16,
            "mention_rate": 0.6,
        },
        "model": {
            "num_buckets": 8192,
            "hidden_dim": 96,
            "out_dim": 64,
            "n_hidden": 3,
            "input_mode": "structured",
            "mrl_cuts": [8, 16, 32, 64],
            "max_tokens": 1024,
            "fc_head_dim": None,
        },
        "stage1": {
            "stage": "infonce",
            "batch_size": 128,
            "lr": 2e-3,
            "max_steps": 400,
            "tau": 0.07,
            "seed": seed + 100,
        },
        "stage2": {
            "stage": "triplet_nce",
            "batch_size": 96,
            "lr": 5e-4,
            "max_steps": 40,
            "tau": 0.07,
            "triplet_tau": 1.0,
            "anchor_weight": 1.0,
            "neg_batch_factor": 0.5,
            "seed": seed + 200,
        },
        "mining": {"neg_per_pos": 2, "rate_floor": 0.05, "pos_cap": 64, "oracle_seed": 1},
        "rebalance_caps": None,
        "holdout_fraction": 0.4,
        "holdout_seed": 1,
        "index": {
            "configs": [
                {"cut": 64, "precision": "fp32"},
                {"cut": 16, "precision": "int8"},
            ],
            "hnsw": {"max_links": 16, "ef_construction": 200, "seed": 0},
            "ef_search": 128,
            "guardrail_min_recall": 0.85,
            "probe_k": 10,
        },
        "eval": {"k_list": [20, 200, 500, 2000], "search": "exact", "workers": 1},
    }


# ---------------------------------------------------------------------------
# workspace paths
# ---------------------------------------------------------------------------


class Workspace:
    def __init__(self, root: str):
        self.root = root

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def ensure(self) -> None:
        os.makedirs(self.root, exist_ok=True)

    corpus_file = property(lambda self: self.path("corpus.jsonl"))
    truth_file = property(lambda self: self.path("truth.jsonl"))
    interactions_file = property(lambda self: self.path("interactions.jsonl"))
    mined_file = property(lambda self: self.path("mined.jsonl"))
    stage1_model = property(lambda self: self.path("model_stage1.bin"))
    stage2_model = property(lambda self: self.path("model_stage2.bin"))
    stage1_run = property(lambda self: self.path("run_stage1.jsonl"))
    stage2_run = property(lambda self: self.path("run_stage2.jsonl"))
    embeddings_file = property(lambda self: self.path("embeddings.bin"))
    registry_file = property(lambda self: self.path("registry.json"))
    latency_file = property(lambda self: self.path("latency.txt"))

    def index_file(self, cut: int, precision: str) -> str:
        return self.path(f"index_{cut}_{precision}.bin")

    def report_file(self, cut: int, precision: str) -> str:
        return self.path(f"report_{cut}_{precision}.tsv")

    efficiency_file = property(lambda self: self.path("efficiency.tsv"))


def _write_text(path, text: str) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def corpus_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def step_gen(cfg: PipelineConfig, ws: Workspace) -> dict:
    ws.ensure()
    spec = cfg.corpus_spec()
    records, interactions = corpus_mod.generate_corpus(spec)
    caps = cfg.raw.get("rebalance_caps")
    if caps is not None:
        interactions = corpus_mod.rebalance(
            interactions, caps, corpus_mod.language_vertical_key(records), seed=spec.seed
        )
    corpus_mod.write_corpus(ws.corpus_file, records, spec)
    corpus_mod.write_truth(ws.truth_file, records, spec.seed)
    corpus_mod.write_interactions(ws.interactions_file, interactions, spec.seed)

    mining = cfg.mining()
    oracle = corpus_mod.RelevanceOracle(seed=int(mining.get("oracle_seed", 1)))
    mined = corpus_mod.mine_hard_examples(
        records,
        interactions,
        oracle,
        neg_per_pos=int(mining.get("neg_per_pos", 2)),
        rate_floor=float(mining.get("rate_floor", 0.05)),
        pos_cap=int(mining.get("pos_cap", 64)),
    )
    lines = [json.dumps({"schema": 1, "type": "mined", "seed": oracle.seed},
                        sort_keys=True, separators=(",", ":"))]
    for qid in sorted(mined):
        sets = mined[qid]
        lines.append(json.dumps(
            {"query_id": qid, "positive_ids": list(sets.positive_ids),
             "negative_ids": list(sets.negative_ids)},
            sort_keys=True, separators=(",", ":")))
    _write_text(ws.mined_file, "\n".join(lines) + "\n")
    return {"records": len(records), "interactions": len(interactions), "mined": len(mined)}


def load_workspace_data(cfg: PipelineConfig, ws: Workspace):
    records, _ = corpus_mod.read_corpus(ws.corpus_file, ws.truth_file)
    interactions, _ = corpus_mod.read_interactions(ws.interactions_file)
    mined = {}
    with open(ws.mined_file, "r", encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            if line.strip():
                row = json.loads(line)
                mined[row["query_id"]] = corpus_mod.MinedSets(
                    positive_ids=tuple(row["positive_ids"]),
                    negative_ids=tuple(row["negative_ids"]),
                )
    return records, interactions, mined


def holdout_split(cfg: PipelineConfig, interactions) -> tuple:
    """Deterministic train/holdout partition of query ids."""
    fraction, seed = cfg.holdout()
    qids = sorted({row.query_id for row in interactions})
    rng = np.random.Generator(np.random.PCG64(seed))
    n_hold = int(len(qids) * fraction)
    held = rng.choice(len(qids), size=n_hold, replace=False)
    holdout = {qids[i] for i in held}
    return [r for r in interactions if r.query_id not in holdout], holdout


def step_train(cfg: PipelineConfig, ws: Workspace, stages=("stage1", "stage2")) -> dict:
    records, interactions, mined = load_workspace_data(cfg, ws)
    train_rows, holdout = holdout_split(cfg, interactions)
    fp = corpus_fingerprint(ws.corpus_file)
    out = {}
    build = cfg.build_config()
    if "stage1" in stages:
        data = TrainData(records=records, interactions=train_rows, corpus_fingerprint=fp)
        artifact, record = train_stage1(data, cfg.train_config("stage1"), build)
        artifact.save(ws.stage1_model)
        record.write_jsonl(ws.stage1_run)
        out["stage1_tte"] = artifact.tte_id
    if "stage2" in stages:
        stage1 = ModelArtifact.load(ws.stage1_model)
        mined_train = {
            q: m for q, m in mined.items()
            if q not in holdout and (m.positive_ids or m.negative_ids)
        }
        data = TrainData(
            records=records, interactions=train_rows,
            mined=mined_train, corpus_fingerprint=fp,
        )
        artifact, record = train_stage2(data, cfg.train_config("stage2"), stage1)
        artifact.save(ws.stage2_model)
        record.write_jsonl(ws.stage2_run)
        out["stage2_tte"] = artifact.tte_id
    return out


def _blob_hash(record) -> int:
    return zlib.crc32(corpus_mod.serialize_structured(record).encode("utf-8"))


def step_embed(cfg: PipelineConfig, ws: Workspace, model_path=None, since=None) -> dict:
    """Encode all documents at full width; ``since`` reuses unchanged rows.

    Change detection is by content hash of the canonical blob; reuse is only
    valid when the previous embeddings carry the same tte id.
    """
    records, _, _ = load_workspace_data(cfg, ws)
    model = ModelArtifact.load(model_path or ws.stage2_model)
    docs = sorted((r for r in records if r.kind != "query"), key=lambda r: r.id)
    hashes = np.asarray([_blob_hash(r) for r in docs], dtype=np.uint32)

    reused = 0
    vectors = None
    if since is not None:
        prev_header, prev_arrays = read_container(since, EMBED_MAGIC, EMBED_SCHEMA_VERSION)
        if prev_header["tte_id"] == model.tte_id:
            prev_ids = prev_arrays["ids"].tobytes().decode("utf-8").split("\n")
            prev_pos = {doc_id: i for i, doc_id in enumerate(prev_ids)}
            prev_hash = prev_arrays["hashes"]
            prev_vecs = prev_arrays["vectors"]
            vectors = np.zeros((len(docs), model.out_dim), np.float32)
            todo = []
            for i, record in enumerate(docs):
                j = prev_pos.get(record.id)
                if j is not None and prev_hash[j] == hashes[i]:
                    vectors[i] = prev_vecs[j]
                    reused += 1
                else:
                    todo.append(i)
            if todo:
                fresh = encode_records(
                    model.doc_tower, model.hasher(), [docs[i] for i in todo]
                )
                for row, i in enumerate(todo):
                    vectors[i] = fresh[row]
    if vectors is None:
        vectors = encode_records(model.doc_tower, model.hasher(), docs)

    header = {
        "tte_id": model.tte_id,
        "query_model_id": model.query_model_id,
        "doc_model_id": model.doc_model_id,
        "dim": model.out_dim,
        "count": len(docs),
    }
    ids_blob = np.frombuffer("\n".join(r.id for r in docs).encode("utf-8"), dtype=np.uint8)
    write_container(
        ws.embeddings_file, EMBED_MAGIC, EMBED_SCHEMA_VERSION, header,
        [("ids", ids_blob), ("hashes", hashes), ("vectors", vectors.astype(np.float32))],
    )
    return {"embedded": len(docs) - reused, "reused": reused, "tte_id": model.tte_id}


def load_embeddings(path) -> tuple:
    header, arrays = read_container(path, EMBED_MAGIC, EMBED_SCHEMA_VERSION)
    ids = arrays["ids"].tobytes().decode("utf-8").split("\n")
    return header, ids, arrays["vectors"].astype(np.float32)


def step_index(cfg: PipelineConfig, ws: Workspace, model_path=None) -> dict:
    model = ModelArtifact.load(model_path or ws.stage2_model)
    header, doc_ids, vectors = load_embeddings(ws.embeddings_file)
    if header["tte_id"] != model.tte_id:
        raise VersionMismatchError(
            f"embeddings tte {header['tte_id']} do not match model tte {model.tte_id}"
        )
    params = HnswParams(**cfg.raw["index"]["hnsw"])
    built = []
    for entry in cfg.raw["index"]["configs"]:
        cut = int(entry["cut"])
        precision = entry["precision"]
        store = cut_store(doc_ids, vectors, cut, precision, model.mrl_cuts)
        artifact = build_artifact(model.tte_id, cut, store, params)
        save_index(artifact, ws.index_file(cut, precision))
        built.append({"cut": cut, "precision": precision, "index_id": artifact.index_id})
    return {"indices": built}


def step_eval(cfg: PipelineConfig, ws: Workspace, model_path=None, timing=False) -> dict:
    model = ModelArtifact.load(model_path or ws.stage2_model)
    header, doc_ids, vectors = load_embeddings(ws.embeddings_file)
    records, interactions, _ = load_workspace_data(cfg, ws)
    _, holdout = holdout_split(cfg, interactions)
    eval_set, coverage = build_eval_set(records, holdout_query_ids=holdout)

    section = cfg.raw["eval"]
    ks = tuple(int(k) for k in section["k_list"])
    guard = cfg.raw["index"]
    overall = {}
    entries = []
    latency_lines = []
    for entry in cfg.raw["index"]["configs"]:
        cut = int(entry["cut"])
        precision = entry["precision"]
        run_cfg = EvalRunConfig(
            ks=ks,
            cut=cut,
            precision=precision,
            search=section.get("search", "exact"),
            ef_search=int(guard.get("ef_search", 128)),
            hnsw=HnswParams(**guard["hnsw"]),
            workers=int(section.get("workers", 1)),
        )
        report = run_protocol(
            model, doc_ids, vectors, header["tte_id"], records, eval_set, coverage, run_cfg
        )
        _write_text(ws.report_file(cut, precision), report.to_tsv())
        overall[f"{cut}/{precision}"] = {k: report.overall[k]["recall"] for k in ks}

        artifact = load_index(ws.index_file(cut, precision))
        if artifact.tte_id != model.tte_id:
            raise VersionMismatchError(
                f"index {artifact.index_id} tte {artifact.tte_id} does not match "
                f"model tte {model.tte_id}"
            )
        entries.append((f"{cut}/{precision}", artifact))
        if timing:
            lat = measure_latency(
                artifact, n_probes=200, k=int(guard.get("probe_k", 10)),
                ef_search=int(guard.get("ef_search", 128)),
            )
            latency_lines.append(
                f"{cut}/{precision} p50={lat['p50_ms']:.3f}ms p95={lat['p95_ms']:.3f}ms"
            )

    baseline = f"{cfg.raw['index']['configs'][0]['cut']}/{cfg.raw['index']['configs'][0]['precision']}"
    rows = efficiency_report(entries, baseline)
    _write_text(ws.efficiency_file, efficiency_table(rows))
    if timing:
        _write_text(ws.latency_file, "\n".join(latency_lines) + "\n")

    # guardrail: graph search must track the exact oracle on its own payload
    min_recall = float(guard.get("guardrail_min_recall", 0.85))
    probe_k = int(guard.get("probe_k", 10))
    rng = np.random.Generator(np.random.PCG64(123))
    for label, artifact in entries:
        probes = rng.normal(size=(50, artifact.store.dim)).astype(np.float32)
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
        recall = recall_vs_exact(
            artifact, probes, probe_k, int(guard.get("ef_search", 128))
        )
        if recall < min_recall:
            raise GuardrailError(
                f"index {label} probe recall {recall:.3f} below guardrail {min_recall}"
            )
    return {"overall": overall}


def step_report(cfg: PipelineConfig, ws: Workspace) -> str:
    """Reconstruct the artifact lineage from persisted headers."""
    lines = ["lineage:"]
    if os.path.exists(ws.corpus_file):
        lines.append(f"  corpus fingerprint: {corpus_fingerprint(ws.corpus_file)}")
    for name, path in (("stage1", ws.stage1_model), ("stage2", ws.stage2_model)):
        if os.path.exists(path):
            model = ModelArtifact.load(path)
            parent = f" parent={model.parent_tte_id}" if model.parent_tte_id else ""
            lines.append(
                f"  {name}: tte={model.tte_id} query={model.query_model_id} "
                f"doc={model.doc_model_id}{parent}"
            )
    if os.path.exists(ws.embeddings_file):
        header, ids, _ = load_embeddings(ws.embeddings_file)
        lines.append(f"  embeddings: tte={header['tte_id']} docs={len(ids)}")
    for entry in cfg.raw["index"]["configs"]:
        path = ws.index_file(int(entry["cut"]), entry["precision"])
        if os.path.exists(path):
            artifact = load_index(path)
            lines.append(
                f"  index {entry['cut']}/{entry['precision']}: id={artifact.index_id} "
                f"tte={artifact.tte_id} docs={len(artifact.store)}"
            )
            report_path = ws.report_file(int(entry["cut"]), entry["precision"])
            if os.path.exists(report_path):
                lines.append(f"    report: {os.path.basename(report_path)}")
    return "\n".join(lines) + "\n"


def run_full_pipeline(cfg: PipelineConfig, ws: Workspace, timing: bool = False) -> dict:
    summary = {}
    summary["gen"] = step_gen(cfg, ws)
    summary["train"] = step_train(cfg, ws)
    summary["embed"] = step_embed(cfg, ws)
    summary["index"] = step_index(cfg, ws)
    summary["eval"] = step_eval(cfg, ws, timing=timing)
    return summary
