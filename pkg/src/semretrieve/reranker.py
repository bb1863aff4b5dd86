"""Learned non-linear scoring head for micro re-ranking.

A three-layer feed-forward net over the concatenated query/document
embeddings: ``s = W3 . LayerNorm(W2 . GELU(W1 [q;d] + b1) + b2) + b3``,
optionally tanh-bounded. Serving is two-step: pull ``expansion * k``
candidates by dot product, re-score exactly that pool with the head, return
the top k. The head can permute the pool but never reach outside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, adam_step
from .errors import ConfigError, DimensionError, TrainingError
from .losses import info_nce_from_logits, triplet_nce_from_scores
from .storage import read_container, write_container
from .towers import content_id

HEAD_MAGIC = b"SRRH"
HEAD_SCHEMA_VERSION = 1


@dataclass
class FfnHead:
    """Scoring head parameters at one embedding cut."""

    cut: int
    hidden: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    w3: Tensor
    b3: Tensor
    dropout_rate: float = 0.1
    bound_output: bool = False
    version_id: str = ""

    @classmethod
    def create(
        cls,
        cut: int,
        hidden: int | None = None,
        dropout_rate: float = 0.1,
        bound_output: bool = False,
        seed: int = 0,
    ) -> "FfnHead":
        hidden = hidden if hidden is not None else 4 * cut
        rng = np.random.Generator(np.random.PCG64(seed))
        w1 = rng.normal(0.0, np.sqrt(2.0 / (2 * cut)), size=(2 * cut, hidden)).astype(np.float32)
        w2 = rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, hidden)).astype(np.float32)
        w3 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 1)).astype(np.float32)
        return cls(
            cut=cut,
            hidden=hidden,
            w1=Tensor(w1, requires_grad=True, name="head.W1"),
            b1=Tensor(np.zeros(hidden, np.float32), requires_grad=True, name="head.b1"),
            w2=Tensor(w2, requires_grad=True, name="head.W2"),
            b2=Tensor(np.zeros(hidden, np.float32), requires_grad=True, name="head.b2"),
            ln_gain=Tensor(np.ones(hidden, np.float32), requires_grad=True, name="head.ln_gain"),
            ln_bias=Tensor(np.zeros(hidden, np.float32), requires_grad=True, name="head.ln_bias"),
            w3=Tensor(w3, requires_grad=True, name="head.W3"),
            b3=Tensor(np.zeros(1, np.float32), requires_grad=True, name="head.b3"),
            dropout_rate=dropout_rate,
            bound_output=bound_output,
        )

    def parameters(self):
        return [
            self.w1, self.b1, self.w2, self.b2,
            self.ln_gain, self.ln_bias, self.w3, self.b3,
        ]

    def score_tensor(
        self, tape: Tape, pairs: Tensor, train: bool = False, dropout_seed: int = 0
    ) -> Tensor:
        """Scores for stacked ``[q;d]`` rows of width ``2*cut``."""
        if pairs.data.shape[-1] != 2 * self.cut:
            raise DimensionError(
                f"head expects pair width {2 * self.cut}, got {pairs.data.shape[-1]}"
            )
        h1 = ad.gelu(tape, ad.add(tape, ad.matmul(tape, pairs, self.w1), self.b1))
        if train and self.dropout_rate > 0.0:
            h1 = ad.dropout(tape, h1, 1.0 - self.dropout_rate, dropout_seed, train=True)
        h2 = ad.layer_norm(
            tape, ad.add(tape, ad.matmul(tape, h1, self.w2), self.b2), self.ln_gain, self.ln_bias
        )
        s = ad.add(tape, ad.matmul(tape, h2, self.w3), self.b3)
        s = ad.rowsum(tape, s)  # [n, 1] -> [n]
        if self.bound_output:
            s = ad.tanh(tape, s)
        return s

    def score_pairs(self, queries: np.ndarray, docs: np.ndarray) -> np.ndarray:
        """Eval-mode scores for row-aligned (query, doc) pairs; deterministic."""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float32))
        docs = np.atleast_2d(np.asarray(docs, dtype=np.float32))
        if queries.shape != docs.shape:
            raise DimensionError("queries and docs must align row-wise")
        pairs = np.concatenate([queries, docs], axis=1)
        return self.score_tensor(Tape(), Tensor(pairs)).data

    def score_grid(self, tape: Tape, queries: Tensor, docs: Tensor,
                   train: bool = False, dropout_seed: int = 0) -> Tensor:
        """All-pairs score matrix [n_q, n_d] (logits for softmax training)."""
        nq = queries.data.shape[0]
        nd = docs.data.shape[0]
        q_rep = ad.take_rows(tape, queries, np.repeat(np.arange(nq), nd))
        d_rep = ad.take_rows(tape, docs, np.tile(np.arange(nd), nq))
        flat = self.score_tensor(
            tape, ad.concat(tape, q_rep, d_rep), train=train, dropout_seed=dropout_seed
        )
        return _reshape_rows(tape, flat, nq, nd)

    def checksum_inputs(self) -> bytes:
        return b"".join(np.ascontiguousarray(p.data).tobytes() for p in self.parameters())

    def save(self, path) -> None:
        header = {
            "cut": self.cut,
            "hidden": self.hidden,
            "dropout_rate": self.dropout_rate,
            "bound_output": self.bound_output,
            "version_id": self.version_id,
        }
        blocks = [(p.name, p.data) for p in self.parameters()]
        write_container(path, HEAD_MAGIC, HEAD_SCHEMA_VERSION, header, blocks)

    @classmethod
    def load(cls, path) -> "FfnHead":
        header, arrays = read_container(path, HEAD_MAGIC, HEAD_SCHEMA_VERSION)
        def t(name):
            return Tensor(arrays[name].astype(np.float32), requires_grad=True, name=name)
        return cls(
            cut=header["cut"],
            hidden=header["hidden"],
            w1=t("head.W1"), b1=t("head.b1"),
            w2=t("head.W2"), b2=t("head.b2"),
            ln_gain=t("head.ln_gain"), ln_bias=t("head.ln_bias"),
            w3=t("head.W3"), b3=t("head.b3"),
            dropout_rate=header["dropout_rate"],
            bound_output=header["bound_output"],
            version_id=header["version_id"],
        )


def _reshape_rows(tape: Tape, flat: Tensor, nq: int, nd: int) -> Tensor:
    out = Tensor(flat.data.reshape(nq, nd))

    def backward(g):
        return (g.reshape(-1),)

    tape.record(out, (flat,), backward)
    return out


@dataclass
class RerankConfig:
    k: int
    expansion: int = 10
    cut: int = 64
    ef_search: int = 128
    encoder_tte_id: str = ""

    def __post_init__(self):
        if self.k < 1 or self.expansion < 1:
            raise ConfigError("k and expansion must be at least 1")

    @property
    def pool_size(self) -> int:
        return self.expansion * self.k


@dataclass
class HeadTrainConfig:
    """Schedule for fitting the head on frozen encoder outputs.

    Every step carries a dot-product regression prior: the head starts (and
    stays) anchored to the cosine ranking, and the contrastive terms can only
    carve out corrections the training pairs consistently support. Stage 1
    adds the in-batch softmax term over verified positive pairs; stage 2 adds
    the logistic term over mined hard pairs on top.
    """

    stage1_steps: int = 800
    stage2_steps: int = 300
    batch_size: int = 48
    prior_batch: int = 192
    lr: float = 1e-3
    stage2_lr: float = 5e-4
    prior_weight: float = 10.0
    grid_tau: float = 0.25
    triplet_weight: float = 0.3
    seed: int = 0


@dataclass
class HeadRunRecord:
    losses_stage1: list = field(default_factory=list)
    losses_stage2: list = field(default_factory=list)


def train_head(
    head: FfnHead,
    query_vecs: np.ndarray,
    doc_vecs: np.ndarray,
    pair_rows: list,
    mined_pairs: dict,
    config: HeadTrainConfig,
    encoder_checksum: str | None = None,
    encoder_checksum_fn=None,
) -> HeadRunRecord:
    """Two-stage head training over frozen encoder outputs.

    ``pair_rows`` holds (query row, positive doc row) index pairs into the
    embedding matrices; ``mined_pairs`` maps query rows to ([positive doc
    rows], [negative doc rows]) for the hard-example stage. The encoders
    contribute only precomputed embeddings; when a checksum callback is
    supplied, any drift is a hard error.
    """
    record = HeadRunRecord()
    q_all = Tensor(np.asarray(query_vecs, dtype=np.float32))
    d_all = Tensor(np.asarray(doc_vecs, dtype=np.float32))
    rows = np.asarray(pair_rows, dtype=np.int64).reshape(-1, 2)
    if rows.shape[0] < 2:
        raise TrainingError("head training needs at least two positive pairs")
    query_rows = np.unique(rows[:, 0])

    mined_items = sorted(mined_pairs.items())
    neg_pairs = np.asarray(
        [(q, m) for q, (_pos, neg) in mined_items for m in neg], dtype=np.int64
    ).reshape(-1, 2)

    params = head.parameters()

    def run_stage(steps, lr, with_triplet, seed, log):
        rng = np.random.Generator(np.random.PCG64(seed))
        state = AdamState(lr=lr)
        for step in range(steps):
            if step == int(steps * 0.7):
                state.lr = lr / 4.0
            tape = Tape()
            # dot-product regression prior over the (query, doc) manifold
            ql = q_all.data[query_rows[rng.integers(query_rows.shape[0], size=config.prior_batch)]]
            dr = d_all.data[rng.integers(d_all.data.shape[0], size=config.prior_batch)]
            target = (ql * dr).sum(axis=1)
            pred = head.score_tensor(
                tape, Tensor(np.concatenate([ql, dr], axis=1)),
                train=True, dropout_seed=config.seed * 70001 + step,
            )
            err = ad.add(tape, pred, Tensor(-target))
            loss = ad.scale(tape, ad.mean_all(tape, ad.mul(tape, err, err)), config.prior_weight)
            # in-batch softmax over verified positive pairs
            take = min(config.batch_size, rows.shape[0])
            pick = rng.choice(rows.shape[0], size=take, replace=False)
            q_batch = ad.take_rows(tape, q_all, rows[pick, 0])
            d_batch = ad.take_rows(tape, d_all, rows[pick, 1])
            grid = head.score_grid(
                tape, q_batch, d_batch, train=True,
                dropout_seed=config.seed * 100003 + step,
            )
            anchor = info_nce_from_logits(tape, ad.scale(tape, grid, 1.0 / config.grid_tau))
            loss = ad.add(tape, loss, anchor)
            if with_triplet and neg_pairs.shape[0]:
                pickn = rng.choice(
                    neg_pairs.shape[0], size=min(take, neg_pairs.shape[0]), replace=False
                )
                neg_scores = head.score_tensor(
                    tape,
                    ad.concat(
                        tape,
                        ad.take_rows(tape, q_all, neg_pairs[pickn, 0]),
                        ad.take_rows(tape, d_all, neg_pairs[pickn, 1]),
                    ),
                    train=True, dropout_seed=config.seed * 300007 + step,
                )
                pos_scores = head.score_tensor(
                    tape, ad.concat(tape, q_batch, d_batch),
                    train=True, dropout_seed=config.seed * 500009 + step,
                )
                trip = triplet_nce_from_scores(tape, pos_scores, neg_scores)
                loss = ad.add(tape, loss, ad.scale(tape, trip, config.triplet_weight))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError("non-finite head loss")
            for p in params:
                p.zero_grad()
            tape.backward(loss)
            adam_step(params, state)
            log.append(value)

    run_stage(config.stage1_steps, config.lr, False, config.seed * 3 + 1, record.losses_stage1)
    run_stage(config.stage2_steps, config.stage2_lr, True, config.seed * 3 + 2, record.losses_stage2)

    if encoder_checksum is not None and encoder_checksum_fn is not None:
        if encoder_checksum_fn() != encoder_checksum:
            raise TrainingError("encoder parameters drifted during head training")
    head.version_id = content_id("head", head.checksum_inputs())
    return record


def retrieve_rerank(store, head: FfnHead | None, q: np.ndarray, cfg: RerankConfig,
                    searcher=None, candidate_ids=None):
    """Two-step retrieval: dot-product pool of ``expansion*k``, head re-scoring.

    ``store`` supplies candidate vectors; ``searcher`` defaults to the exact
    scan (pass an object with ``top_k``-compatible search to use a graph
    index). With no head, the dot-product ranking passes through. Re-ranked
    output is always a permutation of the stage-A pool.
    """
    pool_size = cfg.pool_size
    if searcher is None:
        stage_a = store.top_k(q, pool_size, candidate_ids)
    else:
        stage_a = searcher(q, pool_size, candidate_ids)
    if not stage_a:
        return []
    if head is None:
        return stage_a[: cfg.k]
    pool_ids = [doc_id for doc_id, _ in stage_a]
    rows = np.asarray([store.index_of(doc_id) for doc_id in pool_ids], dtype=np.int64)
    doc_mat = store.dense()[rows]
    q_mat = np.broadcast_to(np.asarray(q, dtype=np.float32), doc_mat.shape)
    scores = head.score_pairs(q_mat, doc_mat)
    order = sorted(range(len(pool_ids)), key=lambda i: (-scores[i], pool_ids[i]))
    return [(pool_ids[i], float(scores[i])) for i in order[: cfg.k]]
