"""Deterministic synthetic multi-market, multi-vertical corpus.

Every query and document is assigned a latent topic drawn from a per-market
topic palette; relevance is exactly "same topic, same vertical", which makes
ground-truth recall computable without any external labeler. Hard negatives
arise two ways: documents of the same topic in a different vertical (they
share name tokens), and documents whose description mentions tokens of other
topics. All generation is a pure function of (spec, seed).

On-disk form is line-delimited: a one-line JSON header carrying the schema
version and seed, then one canonical structured blob per line, UTF-8.
"""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, EncodeError, OracleError

MARKETS = ("JPN", "CAN", "GBR", "FRA", "MEX", "TWN")
MARKET_LANGUAGE = {
    "JPN": "JA",
    "CAN": "EN",
    "GBR": "EN",
    "FRA": "FR",
    "MEX": "ES",
    "TWN": "ZH-TW",
}
LANGUAGES = ("EN", "ES", "FR", "JA", "ZH-TW")
VERTICALS = ("store", "dish", "item")
KINDS = ("query",) + VERTICALS

QUERY_MAX_TOKENS = 128
DOC_MAX_TOKENS = 1024

FILE_SCHEMA_VERSION = 1

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)

_SYLLABLES = {
    "EN": ["tor", "ban", "mel", "ros", "kit", "dal", "fen", "gor",
           "lum", "pel", "ric", "sed", "tam", "vor", "wex", "yal"],
    "ES": ["ca", "ro", "mi", "ta", "lu", "pe", "so", "na", "vi", "do",
           "que", "za", "ni", "bra", "cho", "ga"],
    "FR": ["be", "lou", "mar", "ni", "pou", "re", "sau", "tel", "vau",
           "cre", "fla", "gi", "jou", "pla", "ran", "vea"],
    "JA": ["ka", "ki", "ku", "ke", "ko", "sa", "shi", "su", "se", "so",
           "ta", "chi", "tsu", "te", "to", "na", "ni", "no", "ha", "mi"],
    "ZH-TW": list("寶塔梅魚山茶火龍金銀雲松竹蓮雪風"),
}


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens, split on whitespace and punctuation."""
    return [t.lower() for t in _TOKEN_RE.findall(text)]


# ---------------------------------------------------------------------------
# records and canonical serialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusRecord:
    """One query or document as a typed field map.

    ``latent_topic`` is generation ground truth and is never serialized into
    the blob the encoders see; it travels in a separate truth sidecar.
    """

    id: str
    kind: str
    market: str
    language: str
    fields: tuple
    geo_cell: int
    latent_topic: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown kind {self.kind!r}")
        if self.market not in MARKETS:
            raise ContractViolation(f"unknown market {self.market!r}")
        if self.language not in LANGUAGES:
            raise ContractViolation(f"unknown language {self.language!r}")
        if self.geo_cell < 0:
            raise ContractViolation("geo_cell must be non-negative")
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise ContractViolation("duplicate field names break canonical form")
        required = (
            {"search_term", "country", "language"}
            if self.kind == "query"
            else {"name", "category"}
        )
        missing = required - set(names)
        if missing:
            raise ContractViolation(f"{self.kind} record missing fields {sorted(missing)}")

    def field_map(self) -> dict:
        return dict(self.fields)

    @property
    def vertical(self) -> str:
        """Document kind, or the vertical a query targets."""
        if self.kind != "query":
            return self.kind
        return self.field_map()["vertical"]


def _check_printable(record: CorpusRecord) -> None:
    for name, value in record.fields:
        for ch in name + value:
            if ord(ch) < 32:
                raise EncodeError(
                    f"control character {ch!r} in record {record.id!r} is not representable"
                )


def serialize_structured(record: CorpusRecord) -> str:
    """Canonical one-line JSON rendering: sorted keys, escaped values.

    Field insertion order does not matter; two records with the same field
    map serialize identically.
    """
    _check_printable(record)
    payload = {
        "id": record.id,
        "kind": record.kind,
        "market": record.market,
        "language": record.language,
        "geo_cell": record.geo_cell,
        "fields": {name: value for name, value in record.fields},
    }
    return json.dumps(payload, sort_keys=True, ensure_ascii=True, separators=(",", ":"))


def serialize_plain(record: CorpusRecord) -> str:
    """Field values only, joined by spaces in canonical (sorted-name) order."""
    _check_printable(record)
    return " ".join(value for _, value in sorted(record.fields))


def parse_structured(blob: str) -> CorpusRecord:
    try:
        payload = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise EncodeError(f"not a structured blob: {exc}") from exc
    try:
        fields = tuple(sorted(payload["fields"].items()))
        return CorpusRecord(
            id=payload["id"],
            kind=payload["kind"],
            market=payload["market"],
            language=payload["language"],
            fields=fields,
            geo_cell=int(payload["geo_cell"]),
        )
    except (KeyError, TypeError) as exc:
        raise EncodeError(f"structured blob missing field: {exc}") from exc


@dataclass(frozen=True)
class TrainingRow:
    """List-centric training example: one query, its positives and negatives."""

    query_id: str
    positive_ids: tuple
    negative_ids: tuple
    weights: tuple

    def __post_init__(self):
        if not self.positive_ids:
            raise ContractViolation("positive_ids must be non-empty")
        if len(self.weights) != len(self.positive_ids):
            raise ContractViolation("one weight per positive required")
        if any(w < 0 for w in self.weights):
            raise ContractViolation("weights must be non-negative")
        if set(self.positive_ids) & set(self.negative_ids):
            raise ContractViolation("positive and negative ids must be disjoint")


@dataclass(frozen=True)
class RelevanceOracle:
    """Deterministic relevance rules over (query, doc) record pairs.

    Pure function of the two records and the seed; requires latent topic
    assignments on both records (it is total on generated corpora, and fails
    hard on anything else).
    """

    seed: int = 0

    def label(self, query: CorpusRecord, doc: CorpusRecord) -> str:
        if query.kind != "query" or doc.kind == "query":
            raise OracleError("oracle labels (query, document) pairs only")
        if query.latent_topic is None or doc.latent_topic is None:
            raise OracleError(
                f"latent topic missing on pair ({query.id}, {doc.id}); oracle must be total"
            )
        if query.latent_topic == doc.latent_topic and doc.kind == query.vertical:
            return "hard_positive"
        if self._shares_surface_tokens(query, doc):
            return "hard_negative"
        return "irrelevant"

    @staticmethod
    def _shares_surface_tokens(query: CorpusRecord, doc: CorpusRecord) -> bool:
        q_tokens = set(tokenize(query.field_map()["search_term"]))
        doc_tokens: set[str] = set()
        for _, value in doc.fields:
            doc_tokens.update(tokenize(value))
        return bool(q_tokens & doc_tokens)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    """Knobs for the synthetic generator. Everything derives from ``seed``."""

    markets: tuple = MARKETS
    verticals: tuple = VERTICALS
    docs_per_vertical: int = 120  # per (market, vertical) pair
    queries_per_market: int = 30
    seed: int = 0
    cells_per_market: int = 2
    topics_per_market: int = 12
    max_positives: int = 4
    mention_rate: float = 0.5

    def validate(self) -> None:
        if self.docs_per_vertical < 10:
            raise ConfigError("docs_per_vertical must be at least 10")
        if self.queries_per_market < 10:
            raise ConfigError("queries_per_market must be at least 10")
        if not self.markets or any(m not in MARKETS for m in self.markets):
            raise ConfigError(f"markets must be drawn from {MARKETS}")
        if not self.verticals or any(v not in VERTICALS for v in self.verticals):
            raise ConfigError(f"verticals must be drawn from {VERTICALS}")
        if self.cells_per_market < 1 or self.topics_per_market < 2:
            raise ConfigError("need at least 1 cell and 2 topics per market")
        if self.max_positives < 1:
            raise ConfigError("max_positives must be positive")

    def to_dict(self) -> dict:
        return {
            "markets": list(self.markets),
            "verticals": list(self.verticals),
            "docs_per_vertical": self.docs_per_vertical,
            "queries_per_market": self.queries_per_market,
            "seed": self.seed,
            "cells_per_market": self.cells_per_market,
            "topics_per_market": self.topics_per_market,
            "max_positives": self.max_positives,
            "mention_rate": self.mention_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        for key in ("markets", "verticals"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class _WordFactory:
    """Pseudo-word generator with global uniqueness across the whole corpus.

    Distinct words never collide as strings, so no hash feature is pulled in
    conflicting directions by unrelated topics or markets; the only designed
    token overlaps are the intentional ones (shared topic tokens across
    verticals, description mentions).
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.seen: set[str] = set()

    def word(self, language: str, n_syllables: int) -> str:
        syl = _SYLLABLES[language]
        length = n_syllables
        for _ in range(1000):
            w = "".join(syl[int(self.rng.integers(len(syl)))] for _ in range(length))
            if w not in self.seen:
                self.seen.add(w)
                return w
            length += int(self.rng.random() < 0.3)  # widen the space under pressure
        raise ContractViolation(f"word space exhausted for language {language}")


class _Vocab:
    """Per-market topic vocabulary: name tokens and a category token per topic."""

    def __init__(self, words: _WordFactory, market: str, n_topics: int):
        language = MARKET_LANGUAGE[market]
        self.language = language
        self.words = words
        self.topic_tokens = [
            (words.word(language, 2), words.word(language, 2)) for _ in range(n_topics)
        ]
        self.category_tokens = [words.word(language, 3) for _ in range(n_topics)]
        self.filler = [words.word(language, 2) for _ in range(24)]


def _doc_fields(
    rng: np.random.Generator,
    vocab: _Vocab,
    vertical: str,
    topic: int,
    spec: CorpusSpec,
    n_topics: int,
) -> tuple:
    t1, t2 = vocab.topic_tokens[topic]
    name = f"{t1} {t2}"
    if rng.random() < 0.3:
        name += " " + vocab.filler[int(rng.integers(len(vocab.filler)))]
    # cross-topic mentions make documents lexically confusable: the mentioned
    # topic's tokens appear in the doc, but only outside the name field
    mention = ""
    if rng.random() < spec.mention_rate:
        other = int(rng.integers(n_topics - 1))
        if other >= topic:
            other += 1
        mention = " " + " ".join(vocab.topic_tokens[other])
    description = vocab.filler[int(rng.integers(len(vocab.filler)))] + mention
    fields = [
        ("name", name),
        ("category", vocab.category_tokens[topic]),
        ("description", description),
        ("tags", vocab.filler[int(rng.integers(len(vocab.filler)))]),
    ]
    if vertical == "store":
        fields.append(("cuisine_type", t1))
    elif vertical == "item":
        fields.append(("brand", vocab.words.word(vocab.language, 2)))
    return tuple(sorted(fields))


def generate_corpus(spec: CorpusSpec):
    """Build the corpus and its logged interactions.

    Returns ``(records, interactions)``: all documents followed by all
    queries, then one :class:`TrainingRow` per query. Reproducible bit-exactly
    from the given ``CorpusSpec``; every query is guaranteed at least one
    positive sharing its latent topic, vertical, and geo cell.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    records: list[CorpusRecord] = []
    # docs indexed by (market, vertical, cell, topic) for query construction
    pool: dict = {}

    words = _WordFactory(rng)
    vocabs = {m: _Vocab(words, m, spec.topics_per_market) for m in spec.markets}

    for mi, market in enumerate(spec.markets):
        vocab = vocabs[market]
        for vertical in spec.verticals:
            for j in range(spec.docs_per_vertical):
                topic = int(rng.integers(spec.topics_per_market))
                cell = mi * 1000 + int(rng.integers(spec.cells_per_market))
                doc_id = f"{market}-{vertical}-{j:05d}"
                record = CorpusRecord(
                    id=doc_id,
                    kind=vertical,
                    market=market,
                    language=vocab.language,
                    fields=_doc_fields(
                        rng, vocab, vertical, topic, spec, spec.topics_per_market
                    ),
                    geo_cell=cell,
                    latent_topic=_global_topic(market, topic),
                )
                records.append(record)
                pool.setdefault((market, vertical, cell, topic), []).append(doc_id)

    interactions: list[TrainingRow] = []
    populated = sorted(pool.keys())
    for mi, market in enumerate(spec.markets):
        vocab = vocabs[market]
        local = [key for key in populated if key[0] == market]
        doc_ids_by_vertical: dict = {}
        for key in local:
            doc_ids_by_vertical.setdefault(key[1], []).extend(pool[key])
        for qi in range(spec.queries_per_market):
            market_key = local[int(rng.integers(len(local)))]
            _, vertical, cell, topic = market_key
            t1, t2 = vocab.topic_tokens[topic]
            term = f"{t1} {t2}" if rng.random() < 0.7 else t1
            if rng.random() < 0.3:
                term += " " + vocab.category_tokens[topic]
            query_id = f"{market}-query-{qi:04d}"
            query = CorpusRecord(
                id=query_id,
                kind="query",
                market=market,
                language=vocab.language,
                fields=tuple(
                    sorted(
                        [
                            ("search_term", term),
                            ("country", market),
                            ("language", vocab.language),
                            ("vertical", vertical),
                        ]
                    )
                ),
                geo_cell=cell,
                latent_topic=_global_topic(market, topic),
            )
            records.append(query)

            candidates = pool[market_key]
            n_pos = min(len(candidates), int(rng.integers(1, spec.max_positives + 1)))
            pos_pick = sorted(
                rng.choice(len(candidates), size=n_pos, replace=False).tolist()
            )
            positive_ids = tuple(candidates[i] for i in pos_pick)
            weights = tuple(
                round(float(rng.uniform(0.02, 1.0)), 4) for _ in positive_ids
            )
            vertical_docs = doc_ids_by_vertical[vertical]
            n_neg = int(rng.integers(2, 7))
            neg_ids = []
            attempts = 0
            while len(neg_ids) < n_neg and attempts < 50:
                attempts += 1
                cand = vertical_docs[int(rng.integers(len(vertical_docs)))]
                if cand not in positive_ids and cand not in neg_ids:
                    neg_ids.append(cand)
            interactions.append(
                TrainingRow(
                    query_id=query_id,
                    positive_ids=positive_ids,
                    negative_ids=tuple(neg_ids),
                    weights=weights,
                )
            )
    _assert_token_budget(records)
    return records, interactions


def _global_topic(market: str, local_topic: int) -> int:
    return MARKETS.index(market) * 10000 + local_topic


def _assert_token_budget(records) -> None:
    for record in records:
        n = len(tokenize(serialize_structured(record)))
        limit = QUERY_MAX_TOKENS if record.kind == "query" else DOC_MAX_TOKENS
        if n > limit:
            raise ContractViolation(
                f"record {record.id} exceeds {limit} tokens ({n})"
            )


# ---------------------------------------------------------------------------
# downsampling and hard-example mining
# ---------------------------------------------------------------------------


def rebalance(rows, caps, group_key, seed: int = 0):
    """Cap group sizes by deterministic subsampling.

    ``caps`` is either a single max-per-group or a dict keyed by group.
    Selection within a group is a seeded draw without replacement; surviving
    rows keep their original relative order, so an unbinding cap is a no-op.
    """
    if isinstance(caps, dict):
        cap_for = lambda key: caps.get(key, math.inf)  # noqa: E731
        if any(c <= 0 for c in caps.values()):
            raise ConfigError("caps must be positive")
    else:
        if caps <= 0:
            raise ConfigError("caps must be positive")
        cap_for = lambda key: caps  # noqa: E731

    groups: dict = {}
    for i, row in enumerate(rows):
        groups.setdefault(group_key(row), []).append(i)

    keep: set[int] = set()
    rng = np.random.Generator(np.random.PCG64(seed))
    for key in sorted(groups.keys(), key=repr):
        members = groups[key]
        cap = cap_for(key)
        if len(members) <= cap:
            keep.update(members)
        else:
            picked = rng.choice(len(members), size=int(cap), replace=False)
            keep.update(members[i] for i in picked)
    return [row for i, row in enumerate(rows) if i in keep]


def language_vertical_key(records):
    """Group key for rebalancing: (query language, target vertical)."""
    by_id = {r.id: r for r in records}

    def key(row: TrainingRow):
        q = by_id[row.query_id]
        return (q.language, q.vertical)

    return key


@dataclass(frozen=True)
class MinedSets:
    """Oracle-confirmed hard positives and confusable hard negatives for one query."""

    positive_ids: tuple
    negative_ids: tuple


def mine_hard_examples(
    records,
    interactions,
    oracle: RelevanceOracle,
    neg_per_pos: int = 4,
    rate_floor: float = 0.05,
    pos_cap: int = 6,
) -> dict:
    """Per-query hard positive/negative id sets.

    Positives are the logged positives the oracle confirms (pairs whose
    synthetic interaction rate falls below ``rate_floor`` are dropped as
    outliers), extended with oracle-verified unlogged positives up to
    ``pos_cap`` — mining surfaces relevant documents the logs never clicked.
    Negatives are documents sharing surface tokens with the query that the
    oracle labels ``hard_negative``, at most ``neg_per_pos`` per positive.
    """
    by_id = {r.id: r for r in records}
    docs = [r for r in records if r.kind != "query"]
    token_index: dict = {}
    for doc in docs:
        seen: set[str] = set()
        for _, value in doc.fields:
            for tok in tokenize(value):
                if tok not in seen:
                    seen.add(tok)
                    token_index.setdefault(tok, []).append(doc.id)

    mined: dict[str, MinedSets] = {}
    for row in interactions:
        query = by_id[row.query_id]
        rng = np.random.Generator(
            np.random.PCG64([oracle.seed, zlib.crc32(row.query_id.encode())])
        )
        kept_pos = []
        for doc_id, rate in zip(row.positive_ids, row.weights):
            label = oracle.label(query, by_id[doc_id])
            if label == "hard_positive" and rate >= rate_floor:
                kept_pos.append(doc_id)

        q_tokens = sorted(set(tokenize(query.field_map()["search_term"])))
        candidate_ids: list[str] = []
        seen_ids: set[str] = set(kept_pos)
        for tok in q_tokens:
            for doc_id in token_index.get(tok, ()):
                if doc_id not in seen_ids:
                    seen_ids.add(doc_id)
                    candidate_ids.append(doc_id)
        candidate_ids.sort()

        extra_pos = []
        confirmed_neg = []
        for doc_id in candidate_ids:
            label = oracle.label(query, by_id[doc_id])
            if label == "hard_positive":
                extra_pos.append(doc_id)
            elif label == "hard_negative":
                confirmed_neg.append(doc_id)
        room = max(0, pos_cap - len(kept_pos))
        if len(extra_pos) > room:
            picked = sorted(rng.choice(len(extra_pos), size=room, replace=False).tolist())
            extra_pos = [extra_pos[i] for i in picked]
        positives = kept_pos + extra_pos

        budget = neg_per_pos * max(1, len(positives)) if positives else 0
        if positives and len(confirmed_neg) > budget:
            picked = sorted(rng.choice(len(confirmed_neg), size=budget, replace=False).tolist())
            confirmed_neg = [confirmed_neg[i] for i in picked]
        mined[row.query_id] = MinedSets(
            positive_ids=tuple(positives),
            negative_ids=tuple(confirmed_neg),
        )
    return mined


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _header_line(kind: str, seed: int, extra: dict | None = None) -> str:
    payload = {"schema": FILE_SCHEMA_VERSION, "type": kind, "seed": seed}
    if extra:
        payload.update(extra)
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def write_corpus(path, records, spec: CorpusSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_header_line("corpus", spec.seed, {"spec": spec.to_dict()}) + "\n")
        for record in records:
            fh.write(serialize_structured(record) + "\n")


def write_truth(path, records, seed: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_header_line("truth", seed) + "\n")
        for record in records:
            fh.write(
                json.dumps(
                    {"id": record.id, "topic": record.latent_topic},
                    sort_keys=True,
                    separators=(",", ":"),
                )
                + "\n"
            )


def write_interactions(path, interactions, seed: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_header_line("interactions", seed) + "\n")
        for row in interactions:
            fh.write(
                json.dumps(
                    {
                        "query_id": row.query_id,
                        "positive_ids": list(row.positive_ids),
                        "negative_ids": list(row.negative_ids),
                        "weights": list(row.weights),
                    },
                    sort_keys=True,
                    separators=(",", ":"),
                )
                + "\n"
            )


def _read_header(line: str, expected: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise EncodeError(f"bad header line: {exc}") from exc
    if header.get("type") != expected:
        raise EncodeError(f"expected {expected} file, got {header.get('type')!r}")
    if header.get("schema") != FILE_SCHEMA_VERSION:
        raise EncodeError(f"unsupported schema version {header.get('schema')!r}")
    return header


def read_corpus(path, truth_path=None):
    """Load records; with a truth sidecar, latent topics are re-attached."""
    topics: dict[str, int] = {}
    if truth_path is not None:
        with open(truth_path, "r", encoding="utf-8") as fh:
            _read_header(fh.readline(), "truth")
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    topics[row["id"]] = row["topic"]
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        header = _read_header(fh.readline(), "corpus")
        for line in fh:
            if not line.strip():
                continue
            record = parse_structured(line)
            if record.id in topics:
                record = CorpusRecord(
                    id=record.id,
                    kind=record.kind,
                    market=record.market,
                    language=record.language,
                    fields=record.fields,
                    geo_cell=record.geo_cell,
                    latent_topic=topics[record.id],
                )
            records.append(record)
    return records, header


def read_interactions(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = _read_header(fh.readline(), "interactions")
        for line in fh:
            if not line.strip():
                continue
            payload = json.loads(line)
            rows.append(
                TrainingRow(
                    query_id=payload["query_id"],
                    positive_ids=tuple(payload["positive_ids"]),
                    negative_ids=tuple(payload["negative_ids"]),
                    weights=tuple(payload["weights"]),
                )
            )
    return rows, header
