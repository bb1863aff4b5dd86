"""Contrastive training objectives and the Hit@k proxy metric.

All losses operate on unit-norm embedding batches carried as autodiff
tensors, so gradients flow back into the towers. Cosine similarity between
unit vectors is a plain dot product; the softmax variant is computed with a
row-max shift and the logistic variants in softplus-stable form, so forward
values stay finite on any valid batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, ContractViolation, DimensionError

_UNIT_NORM_TOL = 1e-3


@dataclass
class ContrastiveBatch:
    """Index-aligned (query, positive) embedding pairs with optional row weights."""

    queries: Tensor
    positives: Tensor
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.queries.data.shape != self.positives.data.shape:
            raise DimensionError("queries and positives must be index-aligned")
        if self.queries.data.shape[0] < 1:
            raise ContractViolation("batch must contain at least one pair")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.queries.data.shape[0],):
                raise DimensionError("one weight per row required")
            if (w < 0).any() or w.sum() <= 0:
                raise ContractViolation("weights must be non-negative with positive sum")
            self.weights = w

    @property
    def size(self) -> int:
        return self.queries.data.shape[0]

    @property
    def dim(self) -> int:
        return self.queries.data.shape[1]


@dataclass
class HardExampleBatch:
    """Flattened hard (query, doc) pairs: positives and negatives separately.

    ``pos_queries[i]`` pairs with ``pos_docs[i]``; likewise for negatives.
    Either side may be empty, but not both.
    """

    pos_queries: Tensor
    pos_docs: Tensor
    neg_queries: Tensor
    neg_docs: Tensor

    def __post_init__(self):
        if self.pos_queries.data.shape != self.pos_docs.data.shape:
            raise DimensionError("positive pairs must be index-aligned")
        if self.neg_queries.data.shape != self.neg_docs.data.shape:
            raise DimensionError("negative pairs must be index-aligned")
        if self.n_pos == 0 and self.n_neg == 0:
            raise ContractViolation("hard-example batch is empty on both sides")

    @property
    def n_pos(self) -> int:
        return self.pos_queries.data.shape[0]

    @property
    def n_neg(self) -> int:
        return self.neg_queries.data.shape[0]


@dataclass
class MrlConfig:
    """Nested prefix cuts (ascending, ending at the full width) and their weights."""

    cuts: tuple
    weights: tuple = ()

    def __post_init__(self):
        cuts = tuple(int(c) for c in self.cuts)
        if not cuts or any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ConfigError(f"cuts must be strictly increasing, got {cuts}")
        if cuts[0] < 1:
            raise ConfigError("cuts must be positive")
        self.cuts = cuts
        weights = tuple(float(w) for w in self.weights) or (1.0,) * len(cuts)
        if len(weights) != len(cuts):
            raise ConfigError("one weight per cut required")
        if any(w <= 0 for w in weights):
            raise ConfigError("cut weights must be positive")
        self.weights = weights


@dataclass
class TemperatureParams:
    """Softmax temperature (fixed) plus learnable sigmoid-loss temperature/bias.

    The sigmoid temperature is parameterized as ``exp(log_temp)`` so it stays
    strictly positive throughout training.
    """

    tau: float = 0.07
    log_temp: Tensor = field(default=None)
    bias: Tensor = field(default=None)

    @classmethod
    def create(cls, tau: float = 0.07, init_temp: float = 0.03, init_bias: float = -6.0):
        if tau <= 0 or init_temp <= 0:
            raise ConfigError("temperatures must be strictly positive")
        return cls(
            tau=tau,
            log_temp=Tensor(
                np.asarray(np.log(init_temp), dtype=np.float64),
                requires_grad=True,
                name="sigmoid_log_temp",
            ),
            bias=Tensor(
                np.asarray(init_bias, dtype=np.float64),
                requires_grad=True,
                name="sigmoid_bias",
            ),
        )


def _check_unit_norm(t: Tensor, label: str) -> None:
    norms = np.sqrt((t.data.astype(np.float64) ** 2).sum(axis=-1))
    if norms.size and np.abs(norms - 1.0).max() > _UNIT_NORM_TOL:
        raise ContractViolation(
            f"{label} embeddings must be unit-norm (max deviation "
            f"{np.abs(norms - 1.0).max():.2e})"
        )


def cosine_matrix(tape: Tape, queries: Tensor, docs: Tensor) -> Tensor:
    """All-pairs cosine similarity for unit-norm rows: ``S = Q D^T``."""
    _check_unit_norm(queries, "query")
    _check_unit_norm(docs, "doc")
    return ad.matmul(tape, queries, docs, transpose_b=True)


def pairwise_cosine(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Row-aligned cosine similarity for unit-norm rows."""
    _check_unit_norm(a, "query")
    _check_unit_norm(b, "doc")
    return ad.rowsum(tape, ad.mul(tape, a, b))


def info_nce_from_logits(
    tape: Tape, logits: Tensor, weights: np.ndarray | None = None
) -> Tensor:
    """Mean (or weight-normalized) per-row cross entropy against the diagonal."""
    n = logits.data.shape[0]
    rows = ad.softmax_cross_entropy_rows(tape, logits, np.arange(n))
    if weights is None:
        return ad.mean_all(tape, rows)
    w = np.asarray(weights, dtype=np.float64)
    weighted = ad.mul(tape, rows, Tensor(w.astype(logits.data.dtype)))
    return ad.scale(tape, ad.sum_all(tape, weighted), 1.0 / float(w.sum()))


def info_nce(tape: Tape, batch: ContrastiveBatch, tau: float = 0.07) -> Tensor:
    """Softmax contrastive loss with in-batch negatives.

    ``-(1/N) sum_i log(exp(s_ii/tau) / sum_j exp(s_ij/tau))`` where
    ``s_ij = cos(q_i, d_j)``; with row weights, each row's term is weighted
    and the sum normalized by the total weight. Adding a per-row constant to
    the logits leaves the value unchanged (softmax shift invariance).
    """
    if tau <= 0:
        raise ConfigError("tau must be strictly positive")
    sims = cosine_matrix(tape, batch.queries, batch.positives)
    logits = ad.scale(tape, sims, 1.0 / tau)
    return info_nce_from_logits(tape, logits, batch.weights)


def triplet_nce_from_scores(
    tape: Tape, pos_scores: Tensor | None, neg_scores: Tensor | None
) -> Tensor:
    """``mean softplus(-z+) + mean softplus(z-)`` over available pair scores."""
    terms = []
    if pos_scores is not None and pos_scores.data.shape[0] > 0:
        # log(1 + exp(-z)) == -log(sigmoid(z))
        terms.append(ad.scale(tape, ad.mean_all(tape, ad.log_sigmoid(tape, pos_scores)), -1.0))
    if neg_scores is not None and neg_scores.data.shape[0] > 0:
        neg = ad.scale(tape, neg_scores, -1.0)
        terms.append(ad.scale(tape, ad.mean_all(tape, ad.log_sigmoid(tape, neg)), -1.0))
    if not terms:
        raise ContractViolation("triplet loss needs at least one non-empty side")
    if len(terms) == 1:
        return terms[0]
    return ad.add(tape, terms[0], terms[1])


def triplet_nce(tape: Tape, batch: HardExampleBatch, tau: float = 0.07) -> Tensor:
    """Logistic loss over explicit hard positive/negative pairs.

    Decreasing in each positive similarity and increasing in each negative
    similarity; both terms use the softplus-stable form.
    """
    if tau <= 0:
        raise ConfigError("tau must be strictly positive")
    pos = neg = None
    if batch.n_pos:
        z = pairwise_cosine(tape, batch.pos_queries, batch.pos_docs)
        pos = ad.scale(tape, z, 1.0 / tau)
    if batch.n_neg:
        z = pairwise_cosine(tape, batch.neg_queries, batch.neg_docs)
        neg = ad.scale(tape, z, 1.0 / tau)
    return triplet_nce_from_scores(tape, pos, neg)


def siglip_loss(tape: Tape, batch: ContrastiveBatch, temps: TemperatureParams) -> Tensor:
    """Pairwise sigmoid loss: ``-(1/N) sum_ij log sigmoid(l_ij (s_ij/t' + b))``.

    ``l_ii = +1`` and ``l_ij = -1`` otherwise; the temperature ``t'`` and bias
    ``b`` are learnable and receive gradients.
    """
    if temps.log_temp is None or temps.bias is None:
        raise ConfigError("siglip_loss needs learnable temperature params; use TemperatureParams.create")
    n = batch.size
    sims = cosine_matrix(tape, batch.queries, batch.positives)
    inv_temp = ad.exp(tape, ad.scale(tape, temps.log_temp, -1.0))
    z = ad.add(tape, ad.mul(tape, sims, inv_temp), temps.bias)
    labels = np.full((n, n), -1.0, dtype=sims.data.dtype)
    np.fill_diagonal(labels, 1.0)
    signed = ad.mul(tape, z, Tensor(labels))
    total = ad.sum_all(tape, ad.log_sigmoid(tape, signed))
    return ad.scale(tape, total, -1.0 / n)


def truncate_embeddings(tape: Tape, t: Tensor, m: int) -> Tensor:
    """Differentiable prefix cut: first ``m`` dims re-normalized to unit length.

    The full-width cut is the identity, so a single-cut wrapper reproduces the
    base loss bit-exactly.
    """
    if m == t.data.shape[-1]:
        return t
    return ad.l2_normalize(tape, ad.slice_prefix(tape, t, m))


def _truncate_batch(tape: Tape, batch, m: int):
    if isinstance(batch, ContrastiveBatch):
        return ContrastiveBatch(
            queries=truncate_embeddings(tape, batch.queries, m),
            positives=truncate_embeddings(tape, batch.positives, m),
            weights=batch.weights,
        )
    if isinstance(batch, HardExampleBatch):
        return HardExampleBatch(
            pos_queries=truncate_embeddings(tape, batch.pos_queries, m),
            pos_docs=truncate_embeddings(tape, batch.pos_docs, m),
            neg_queries=truncate_embeddings(tape, batch.neg_queries, m),
            neg_docs=truncate_embeddings(tape, batch.neg_docs, m),
        )
    raise ContractViolation(f"unsupported batch type {type(batch).__name__}")


def mrl_wrap(tape: Tape, base_loss, cfg: MrlConfig, batch) -> Tensor:
    """Sum the base loss over every declared prefix cut.

    ``base_loss(tape, batch) -> scalar Tensor`` is applied to the batch
    truncated (and re-normalized) at each cut; weights scale each term.
    Gradients reach all prefix dimensions, the earliest ones through every cut.
    """
    dim = _batch_dim(batch)
    if cfg.cuts[-1] > dim:
        raise ConfigError(f"cut {cfg.cuts[-1]} exceeds embedding width {dim}")
    total = None
    for m, w in zip(cfg.cuts, cfg.weights):
        term = base_loss(tape, _truncate_batch(tape, batch, m))
        if w != 1.0:
            term = ad.scale(tape, term, w)
        total = term if total is None else ad.add(tape, total, term)
    return total


def _batch_dim(batch) -> int:
    if isinstance(batch, ContrastiveBatch):
        return batch.dim
    if batch.n_pos:
        return batch.pos_queries.data.shape[1]
    return batch.neg_queries.data.shape[1]


def hit_at_k(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label column lands in the top-k logits.

    Ties are broken by lowest column index (stable sort on descending value).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise DimensionError("logits must be a 2-D matrix")
    b, m = z.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise DimensionError("one label per row required")
    if b and (labels.min() < 0 or labels.max() >= m):
        raise ContractViolation("label out of range")
    if not (1 <= k <= m):
        raise ContractViolation(f"k must be in [1, {m}], got {k}")
    hits = 0
    order = np.argsort(-z, axis=1, kind="stable")
    for i in range(b):
        if labels[i] in order[i, :k]:
            hits += 1
    return hits / b if b else 0.0
