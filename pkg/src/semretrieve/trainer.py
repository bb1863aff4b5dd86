"""Two-stage training orchestration with checkpointing and run tracking.

Stage 1 fits both towers with a softmax (or pairwise-sigmoid) contrastive
loss over logged (query, positive) pairs, using the rest of the batch as
negatives. Stage 2 fine-tunes on mined hard example sets with the logistic
pair loss, by default touching only the last three layers of each tower.
Both stages wrap the base loss over every training prefix cut.

Everything is a pure function of (config, seed, data) in single-threaded
mode: batch order, initialization, and version ids all derive from the
config, so re-running a job reproduces artifacts byte for byte. Checkpoints
capture parameters, optimizer moments, and the sampler RNG state; resuming
reproduces the exact loss sequence of an uninterrupted run.
"""

from __future__ import annotations

import json
import queue
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, adam_step
from .errors import ConfigError, ContractViolation, TrainingError
from .losses import (
    ContrastiveBatch,
    HardExampleBatch,
    MrlConfig,
    TemperatureParams,
    hit_at_k,
    info_nce,
    mrl_wrap,
    siglip_loss,
    triplet_nce,
)
from .storage import read_container, write_container
from .towers import (
    FeatureHasher,
    HasherConfig,
    ModelArtifact,
    TowerParams,
    content_id,
    record_blob,
    tower_bytes,
)

CHECKPOINT_MAGIC = b"SRCK"
CHECKPOINT_SCHEMA_VERSION = 1

STAGE_INFONCE = "infonce"
STAGE_TRIPLET = "triplet_nce"


@dataclass(frozen=True)
class ModelBuildConfig:
    """Architecture knobs shared by both towers.

    ``fc_head_dim`` swaps the nested-prefix design for a dedicated trained
    projection: towers get one extra dense layer down to that width and the
    only serving cut is the head width itself (the ablation baseline).
    """

    num_buckets: int = 2**15
    hidden_dim: int = 128
    out_dim: int = 64
    n_hidden: int = 3
    input_mode: str = "structured"
    mrl_cuts: tuple = (8, 16, 32, 64)
    max_tokens: int = 1024
    fc_head_dim: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mrl_cuts"] = list(self.mrl_cuts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBuildConfig":
        d = dict(d)
        d["mrl_cuts"] = tuple(d["mrl_cuts"])
        return cls(**d)

    def hasher_config(self) -> HasherConfig:
        return HasherConfig(
            num_buckets=self.num_buckets, mode=self.input_mode, max_tokens=self.max_tokens
        )


@dataclass(frozen=True)
class TrainConfig:
    """One stage's hyperparameters; serialized whole into the run record."""

    stage: str = STAGE_INFONCE
    loss: str = "infonce"  # or "siglip" (stage 1 only)
    batch_size: int = 128
    tau: float = 0.07
    lr: float = 5e-5
    max_steps: int = 500
    mrl_train_cuts: tuple | None = None  # None: use the model's serving cuts
    accum_steps: int = 1
    trainable_last_layers: int | None = None  # None: all layers
    seed: int = 0
    checkpoint_interval: int = 0  # 0: off
    eval_interval: int = 0
    eval_hit_k: int = 10
    use_row_weights: bool = False
    siglip_init_temp: float = 0.03
    siglip_init_bias: float = -6.0
    neg_batch_factor: float = 4.0  # stage-2 negatives per positive in a step
    triplet_tau: float = 1.0
    anchor_weight: float = 1.0  # weight of the in-batch softmax term in stage 2
    prefetch_depth: int = 0

    def __post_init__(self):
        if self.stage not in (STAGE_INFONCE, STAGE_TRIPLET):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.stage == STAGE_INFONCE and self.batch_size < 2:
            raise ConfigError("in-batch negatives require batch_size >= 2")
        if self.loss not in ("infonce", "siglip"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.tau <= 0 or self.lr < 0:
            raise ConfigError("tau must be positive and lr non-negative")
        if self.accum_steps < 1:
            raise ConfigError("accum_steps must be at least 1")
        if self.prefetch_depth > 0 and self.checkpoint_interval > 0:
            # the prefetch worker draws batches ahead of consumption, so a
            # mid-run RNG snapshot would depend on queue timing
            raise ConfigError("prefetching and checkpointing cannot be combined")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.mrl_train_cuts is not None:
            d["mrl_train_cuts"] = list(self.mrl_train_cuts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("mrl_train_cuts") is not None:
            d["mrl_train_cuts"] = tuple(d["mrl_train_cuts"])
        return cls(**d)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass
class RunRecord:
    """Append-only trace of one training run."""

    run_id: str
    stage: str
    config: dict
    losses: list = field(default_factory=list)  # (step, loss)
    evals: list = field(default_factory=list)  # (step, {"hit@k": value})
    artifact_ids: dict = field(default_factory=dict)

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            head = {"event": "run", "run_id": self.run_id, "stage": self.stage,
                    "config": self.config}
            fh.write(json.dumps(head, sort_keys=True, separators=(",", ":")) + "\n")
            for step, loss in self.losses:
                fh.write(json.dumps({"event": "loss", "step": step, "loss": loss},
                                    sort_keys=True, separators=(",", ":")) + "\n")
            for step, metrics in self.evals:
                fh.write(json.dumps({"event": "eval", "step": step, "metrics": metrics},
                                    sort_keys=True, separators=(",", ":")) + "\n")
            fh.write(json.dumps({"event": "artifacts", "ids": self.artifact_ids},
                                sort_keys=True, separators=(",", ":")) + "\n")


class FeatureCache:
    """Hashed features per record id, computed once per (hasher, corpus)."""

    def __init__(self, hasher: FeatureHasher, records):
        self.hasher = hasher
        self._by_id = {}
        for record in records:
            blob = record_blob(record, hasher.config.mode)
            self._by_id[record.id] = self.hasher.features(blob)

    def batch(self, ids):
        idx_parts, val_parts, row_parts = [], [], []
        for r, rid in enumerate(ids):
            idx, val = self._by_id[rid]
            idx_parts.append(idx)
            val_parts.append(val)
            row_parts.append(np.full(idx.shape[0], r, dtype=np.int64))
        return (
            np.concatenate(idx_parts),
            np.concatenate(val_parts),
            np.concatenate(row_parts),
            len(ids),
        )


@dataclass
class TrainData:
    """Corpus records plus logged rows; mined sets only needed for stage 2."""

    records: list
    interactions: list
    mined: dict | None = None
    eval_pairs: list | None = None  # held-out (query_id, doc_id) palette
    corpus_fingerprint: str = ""

    def pair_rows(self):
        """Flatten list-centric rows to (query_id, doc_id, weight) triples."""
        rows = []
        for row in self.interactions:
            for doc_id, w in zip(row.positive_ids, row.weights):
                rows.append((row.query_id, doc_id, w))
        return rows


def prefetch_iter(iterable, depth: int):
    """Order-preserving bounded prefetch on a worker thread."""
    if depth <= 0:
        yield from iterable
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    sentinel = object()

    def worker():
        for item in iterable:
            q.put(item)
        q.put(sentinel)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is sentinel:
            break
        yield item
    thread.join()


# ---------------------------------------------------------------------------
# trainer state and checkpointing
# ---------------------------------------------------------------------------


@dataclass
class TrainerState:
    query_tower: TowerParams
    doc_tower: TowerParams
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    temps: TemperatureParams | None = None
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)


def init_state(build: ModelBuildConfig, cfg: TrainConfig) -> TrainerState:
    from .towers import fixed_projection_head

    query_tower = TowerParams.create(
        seed=cfg.seed * 2 + 1,
        num_buckets=build.num_buckets,
        hidden_dim=build.hidden_dim,
        out_dim=build.out_dim,
        n_hidden=build.n_hidden,
        prefix="q",
    )
    doc_tower = TowerParams.create(
        seed=cfg.seed * 2 + 2,
        num_buckets=build.num_buckets,
        hidden_dim=build.hidden_dim,
        out_dim=build.out_dim,
        n_hidden=build.n_hidden,
        prefix="d",
    )
    if build.fc_head_dim is not None:
        query_tower = fixed_projection_head(query_tower, build.fc_head_dim, seed=cfg.seed * 2 + 3)
        doc_tower = fixed_projection_head(doc_tower, build.fc_head_dim, seed=cfg.seed * 2 + 4)
    return _finish_state(query_tower, doc_tower, cfg)


def state_from_artifact(artifact: ModelArtifact, cfg: TrainConfig) -> TrainerState:
    # copy so further training never mutates the source artifact
    return _finish_state(artifact.query_tower.copy(), artifact.doc_tower.copy(), cfg)


def _finish_state(query_tower, doc_tower, cfg: TrainConfig) -> TrainerState:
    temps = None
    if cfg.loss == "siglip":
        temps = TemperatureParams.create(
            tau=cfg.tau, init_temp=cfg.siglip_init_temp, init_bias=cfg.siglip_init_bias
        )
    return TrainerState(
        query_tower=query_tower,
        doc_tower=doc_tower,
        adam=AdamState(lr=cfg.lr),
        rng=np.random.Generator(np.random.PCG64(cfg.seed + 10_000)),
        temps=temps,
    )


def save_checkpoint(path, state: TrainerState, cfg: TrainConfig, build: ModelBuildConfig) -> None:
    header = {
        "config": cfg.to_dict(),
        "build": build.to_dict(),
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "losses": state.losses,
        "evals": state.evals,
        "adam": {"lr": state.adam.lr, "beta1": state.adam.beta1, "beta2": state.adam.beta2,
                 "eps": state.adam.eps, "step": state.adam.step},
        "has_temps": state.temps is not None,
    }
    blocks = []
    for role, tower in (("q", state.query_tower), ("d", state.doc_tower)):
        for layer in tower.layers:
            for t in layer.tensors():
                blocks.append((f"param.{role}.{t.name}", t.data))
    for key in sorted(state.adam.m):
        blocks.append((f"adam.m.{key}", state.adam.m[key]))
        blocks.append((f"adam.v.{key}", state.adam.v[key]))
    if state.temps is not None:
        blocks.append(("temps.log_temp", state.temps.log_temp.data))
        blocks.append(("temps.bias", state.temps.bias.data))
    header["manifests"] = {
        "q": _layer_manifest(state.query_tower),
        "d": _layer_manifest(state.doc_tower),
    }
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_SCHEMA_VERSION, header, blocks)


def _layer_manifest(tower: TowerParams) -> dict:
    return {
        "num_buckets": tower.num_buckets,
        "hidden_dim": tower.hidden_dim,
        "out_dim": tower.out_dim,
        "layers": [
            {"name": l.name, "kind": l.kind, "frozen": l.frozen, "has_bias": l.bias is not None}
            for l in tower.layers
        ],
    }


def load_checkpoint(path, cfg: TrainConfig) -> tuple:
    """Restore (state, build config); refuses a config that differs from the run's."""
    header, arrays = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_SCHEMA_VERSION)
    saved_cfg = TrainConfig.from_dict(header["config"])
    if saved_cfg.canonical() != cfg.canonical():
        raise ConfigError(
            "checkpoint config mismatch; resume requires the identical TrainConfig "
            f"(saved seed {saved_cfg.seed}, requested seed {cfg.seed})"
        )
    build = ModelBuildConfig.from_dict(header["build"])
    towers = {}
    for role in ("q", "d"):
        towers[role] = _tower_from_checkpoint(header["manifests"][role], arrays, role)
    state = TrainerState(
        query_tower=towers["q"],
        doc_tower=towers["d"],
        adam=AdamState(**header["adam"]),
        rng=np.random.Generator(np.random.PCG64()),
        step=header["step"],
        losses=[tuple(x) for x in header["losses"]],
        evals=[tuple(x) for x in header["evals"]],
    )
    state.rng.bit_generator.state = header["rng_state"]
    for name, arr in arrays.items():
        if name.startswith("adam.m."):
            state.adam.m[name[len("adam.m."):]] = arr.astype(np.float32).copy()
        elif name.startswith("adam.v."):
            state.adam.v[name[len("adam.v."):]] = arr.astype(np.float32).copy()
    if header["has_temps"]:
        state.temps = TemperatureParams(
            tau=cfg.tau,
            log_temp=Tensor(arrays["temps.log_temp"].copy(), requires_grad=True,
                            name="sigmoid_log_temp"),
            bias=Tensor(arrays["temps.bias"].copy(), requires_grad=True, name="sigmoid_bias"),
        )
    return state, build


def _tower_from_checkpoint(manifest: dict, arrays: dict, role: str) -> TowerParams:
    from .towers import TowerLayer

    layers = []
    for spec in manifest["layers"]:
        name = spec["name"]
        weight = Tensor(
            arrays[f"param.{role}.{name}.W"].astype(np.float32).copy(),
            requires_grad=True,
            name=f"{name}.W",
        )
        bias = None
        if spec["has_bias"]:
            bias = Tensor(
                arrays[f"param.{role}.{name}.b"].astype(np.float32).copy(),
                requires_grad=True,
                name=f"{name}.b",
            )
        layers.append(TowerLayer(name=name, weight=weight, bias=bias, kind=spec["kind"],
                                 frozen=spec["frozen"]))
    return TowerParams(
        layers=layers,
        num_buckets=manifest["num_buckets"],
        hidden_dim=manifest["hidden_dim"],
        out_dim=manifest["out_dim"],
    )


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _serving_cuts(build: ModelBuildConfig) -> tuple:
    if build.fc_head_dim is not None:
        return (build.fc_head_dim,)
    return build.mrl_cuts


def _mrl_config(build: ModelBuildConfig, cfg: TrainConfig) -> MrlConfig:
    cuts = cfg.mrl_train_cuts if cfg.mrl_train_cuts is not None else _serving_cuts(build)
    return MrlConfig(cuts=tuple(cuts))


def _trainable(state: TrainerState):
    params = list(state.query_tower.trainable_tensors())
    params += list(state.doc_tower.trainable_tensors())
    if state.temps is not None:
        params += [state.temps.log_temp, state.temps.bias]
    return params


def _apply_freeze(state: TrainerState, cfg: TrainConfig) -> None:
    from .towers import freeze_boundary

    if cfg.trainable_last_layers is not None:
        freeze_boundary(state.query_tower, cfg.trainable_last_layers)
        freeze_boundary(state.doc_tower, cfg.trainable_last_layers)


def _proxy_eval(state: TrainerState, cache_q, cache_d, eval_pairs, k: int) -> float:
    ids_q = [q for q, _ in eval_pairs]
    ids_d = [d for _, d in eval_pairs]
    q_emb = state.query_tower.forward(Tape(), cache_q.batch(ids_q)).data
    d_emb = state.doc_tower.forward(Tape(), cache_d.batch(ids_d)).data
    logits = q_emb @ d_emb.T
    return hit_at_k(logits, np.arange(len(eval_pairs)), k)


def _finalize(
    state: TrainerState,
    build: ModelBuildConfig,
    cfg: TrainConfig,
    data: TrainData,
    parent_tte: str,
    stage_tag: str,
) -> tuple:
    tte_id = content_id(
        "tte", cfg.canonical(), json.dumps(build.to_dict(), sort_keys=True),
        data.corpus_fingerprint, stage_tag, parent_tte
    )
    artifact = ModelArtifact(
        query_model_id=content_id("qm", tower_bytes(state.query_tower)),
        doc_model_id=content_id("dm", tower_bytes(state.doc_tower)),
        tte_id=tte_id,
        parent_tte_id=parent_tte,
        hasher_config=build.hasher_config(),
        query_tower=state.query_tower,
        doc_tower=state.doc_tower,
        mrl_cuts=_serving_cuts(build),
    )
    record = RunRecord(
        run_id=content_id("run", cfg.canonical(), stage_tag, data.corpus_fingerprint),
        stage=stage_tag,
        config=cfg.to_dict(),
        losses=state.losses,
        evals=state.evals,
        artifact_ids={
            "tte_id": artifact.tte_id,
            "query_model_id": artifact.query_model_id,
            "doc_model_id": artifact.doc_model_id,
            "parent_tte_id": parent_tte,
        },
    )
    return artifact, record


def _optim_step(state: TrainerState, tapes_and_losses, cfg: TrainConfig, checkpoint_cb) -> float:
    """Backward over accumulated micro-batches, average, and apply Adam."""
    params = _trainable(state)
    for p in params:
        p.zero_grad()
    total = 0.0
    for tape, loss in tapes_and_losses:
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(
                f"non-finite loss at step {state.step}; last checkpoint retained"
            )
        total += value
        tape.backward(loss)
    n = len(tapes_and_losses)
    if n > 1:
        for p in params:
            if p.grad is not None:
                p.grad /= n
    adam_step(params, state.adam)
    state.step += 1
    mean_loss = total / n
    state.losses.append((state.step, mean_loss))
    if checkpoint_cb is not None and cfg.checkpoint_interval > 0:
        if state.step % cfg.checkpoint_interval == 0:
            checkpoint_cb(state)
    return mean_loss


def train_stage1(
    data: TrainData,
    cfg: TrainConfig,
    build: ModelBuildConfig,
    state: TrainerState | None = None,
    checkpoint_cb=None,
) -> tuple:
    """Contrastive stage over logged pairs; returns (ModelArtifact, RunRecord)."""
    if cfg.stage != STAGE_INFONCE:
        raise ConfigError("train_stage1 requires an in-batch-negative stage config")
    if state is None:
        state = init_state(build, cfg)
    _apply_freeze(state, cfg)
    hasher = FeatureHasher(build.hasher_config())
    cache = FeatureCache(hasher, data.records)
    mrl = _mrl_config(build, cfg)
    rows = data.pair_rows()
    if len(rows) < 2:
        raise ContractViolation("need at least two logged pairs for in-batch negatives")

    def batches():
        while True:
            take = min(cfg.batch_size, len(rows))
            pick = state.rng.choice(len(rows), size=take, replace=False)
            yield [rows[i] for i in pick]

    batch_iter = prefetch_iter(batches(), cfg.prefetch_depth) if cfg.prefetch_depth else batches()
    while state.step < cfg.max_steps:
        micro = []
        for _ in range(cfg.accum_steps):
            batch = next(batch_iter)
            tape = Tape()
            q_ids = [q for q, _, _ in batch]
            d_ids = [d for _, d, _ in batch]
            weights = np.asarray([w for _, _, w in batch]) if cfg.use_row_weights else None
            q_emb = state.query_tower.forward(tape, cache.batch(q_ids))
            d_emb = state.doc_tower.forward(tape, cache.batch(d_ids))
            cbatch = ContrastiveBatch(q_emb, d_emb, weights)
            if cfg.loss == "siglip":
                loss = mrl_wrap(
                    tape, lambda tp, b: siglip_loss(tp, b, state.temps), mrl, cbatch
                )
            else:
                loss = mrl_wrap(
                    tape, lambda tp, b: info_nce(tp, b, cfg.tau), mrl, cbatch
                )
            micro.append((tape, loss))
        _optim_step(state, micro, cfg, checkpoint_cb)
        if cfg.eval_interval and data.eval_pairs and state.step % cfg.eval_interval == 0:
            hit = _proxy_eval(state, cache, cache, data.eval_pairs, cfg.eval_hit_k)
            state.evals.append((state.step, {f"hit@{cfg.eval_hit_k}": hit}))
    return _finalize(state, build, cfg, data, parent_tte="", stage_tag="stage1")


def train_stage2(
    data: TrainData,
    cfg: TrainConfig,
    stage1_artifact: ModelArtifact,
    state: TrainerState | None = None,
    checkpoint_cb=None,
) -> tuple:
    """Hard-example fine-tuning stage; freezes all but the last layers by default."""
    if cfg.stage != STAGE_TRIPLET:
        raise ConfigError("train_stage2 requires a hard-example stage config")
    if data.mined is None:
        raise ContractViolation("stage 2 needs mined hard example sets")
    covered = sum(1 for m in data.mined.values() if m.positive_ids or m.negative_ids)
    if covered * 2 < len(data.mined):
        raise ContractViolation("mined sets must cover at least half the queries")
    build = ModelBuildConfig(
        num_buckets=stage1_artifact.hasher_config.num_buckets,
        hidden_dim=stage1_artifact.query_tower.hidden_dim,
        out_dim=stage1_artifact.out_dim,
        n_hidden=sum(1 for l in stage1_artifact.query_tower.layers if l.kind == "hidden"),
        input_mode=stage1_artifact.hasher_config.mode,
        mrl_cuts=stage1_artifact.mrl_cuts,
        max_tokens=stage1_artifact.hasher_config.max_tokens,
    )
    if state is None:
        state = state_from_artifact(stage1_artifact, cfg)
    if cfg.trainable_last_layers is None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "trainable_last_layers": 3})
    _apply_freeze(state, cfg)
    hasher = FeatureHasher(build.hasher_config())
    cache = FeatureCache(hasher, data.records)
    mrl = _mrl_config(build, cfg)

    pos_pairs = []
    neg_pairs = []
    for qid in sorted(data.mined):
        sets = data.mined[qid]
        pos_pairs.extend((qid, did) for did in sets.positive_ids)
        neg_pairs.extend((qid, did) for did in sets.negative_ids)
    if not pos_pairs and not neg_pairs:
        raise ContractViolation("mined sets are empty")

    while state.step < cfg.max_steps:
        micro = []
        for _ in range(cfg.accum_steps):
            tape = Tape()
            parts = {}
            neg_take = max(1, int(round(cfg.batch_size * cfg.neg_batch_factor)))
            for name, pool, take in (
                ("pos", pos_pairs, min(cfg.batch_size, len(pos_pairs))),
                ("neg", neg_pairs, min(neg_take, len(neg_pairs))),
            ):
                if take == 0:
                    parts[name] = None
                    continue
                pick = state.rng.choice(len(pool), size=take, replace=False)
                pairs = [pool[i] for i in pick]
                q_emb = state.query_tower.forward(tape, cache.batch([q for q, _ in pairs]))
                d_emb = state.doc_tower.forward(tape, cache.batch([d for _, d in pairs]))
                parts[name] = (q_emb, d_emb)
            empty = Tensor(np.zeros((0, build.out_dim), np.float32))
            hbatch = HardExampleBatch(
                pos_queries=parts["pos"][0] if parts["pos"] else empty,
                pos_docs=parts["pos"][1] if parts["pos"] else empty,
                neg_queries=parts["neg"][0] if parts["neg"] else empty,
                neg_docs=parts["neg"][1] if parts["neg"] else empty,
            )
            loss = mrl_wrap(
                tape, lambda tp, b: triplet_nce(tp, b, cfg.triplet_tau), mrl, hbatch
            )
            # the combined fine-tuning objective: the softmax term over the
            # verified positive pairs keeps per-row push/pull balanced while
            # the logistic term sharpens the mined boundary
            if cfg.anchor_weight > 0.0 and parts["pos"] and parts["pos"][0].data.shape[0] >= 2:
                cbatch = ContrastiveBatch(parts["pos"][0], parts["pos"][1])
                anchor = mrl_wrap(tape, lambda tp, b: info_nce(tp, b, cfg.tau), mrl, cbatch)
                loss = ad.add(tape, loss, ad.scale(tape, anchor, cfg.anchor_weight))
            micro.append((tape, loss))
        _optim_step(state, micro, cfg, checkpoint_cb)
        if cfg.eval_interval and data.eval_pairs and state.step % cfg.eval_interval == 0:
            hit = _proxy_eval(state, cache, cache, data.eval_pairs, cfg.eval_hit_k)
            state.evals.append((state.step, {f"hit@{cfg.eval_hit_k}": hit}))
    return _finalize(
        state, build, cfg, data, parent_tte=stage1_artifact.tte_id, stage_tag="stage2"
    )


def hard_negative_margin(artifact: ModelArtifact, records, mined: dict) -> float:
    """Mean cos(q, d+) minus mean cos(q, d-) over the mined sets."""
    from .towers import encode_records

    hasher = artifact.hasher()
    by_id = {r.id: r for r in records}
    pos_q, pos_d, neg_q, neg_d = [], [], [], []
    for qid in sorted(mined):
        sets = mined[qid]
        pos_q.extend([by_id[qid]] * len(sets.positive_ids))
        pos_d.extend(by_id[d] for d in sets.positive_ids)
        neg_q.extend([by_id[qid]] * len(sets.negative_ids))
        neg_d.extend(by_id[d] for d in sets.negative_ids)
    if not pos_q or not neg_q:
        raise ContractViolation("margin needs both mined positives and negatives")
    pq = encode_records(artifact.query_tower, hasher, pos_q)
    pd = encode_records(artifact.doc_tower, hasher, pos_d)
    nq = encode_records(artifact.query_tower, hasher, neg_q)
    nd = encode_records(artifact.doc_tower, hasher, neg_d)
    return float((pq * pd).sum(axis=1).mean() - (nq * nd).sum(axis=1).mean())
