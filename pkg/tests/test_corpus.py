"""Synthetic corpus generation, serialization, rebalancing, and mining."""

import json
import math

import numpy as np
import pytest

from semretrieve.corpus import (
    DOC_MAX_TOKENS,
    QUERY_MAX_TOKENS,
    CorpusRecord,
    CorpusSpec,
    RelevanceOracle,
    generate_corpus,
    language_vertical_key,
    mine_hard_examples,
    parse_structured,
    read_corpus,
    read_interactions,
    rebalance,
    serialize_plain,
    serialize_structured,
    tokenize,
    write_corpus,
    write_interactions,
    write_truth,
)
from semretrieve.errors import ConfigError, ContractViolation, EncodeError, OracleError

from conftest import SMALL_SPEC


class TestGeneration:
    def test_reruns_are_byte_identical(self, small_corpus):
        records, interactions = small_corpus
        records2, interactions2 = generate_corpus(SMALL_SPEC)
        assert [serialize_structured(r) for r in records] == [
            serialize_structured(r) for r in records2
        ]
        assert interactions == interactions2

    def test_every_market_vertical_pair_populated(self, small_corpus):
        records, _ = small_corpus
        pairs = {(r.market, r.kind) for r in records if r.kind != "query"}
        assert pairs == {
            (m, v) for m in SMALL_SPEC.markets for v in SMALL_SPEC.verticals
        }

    def test_positive_pair_counts_balanced_across_verticals(self):
        """Count positives per vertical in the emitted interactions."""
        spec = CorpusSpec(docs_per_vertical=180, queries_per_market=60, seed=7)
        records, interactions = generate_corpus(spec)
        vertical_of = {r.id: r.vertical for r in records}
        counts = {v: 0 for v in spec.verticals}
        for row in interactions:
            counts[vertical_of[row.positive_ids[0]]] += len(row.positive_ids)
        mean = sum(counts.values()) / len(counts)
        for vertical, count in counts.items():
            assert abs(count - mean) / mean <= 0.10, counts

    def test_label_soundness(self, small_corpus):
        """Every logged positive shares the query's latent topic."""
        records, interactions = small_corpus
        by_id = {r.id: r for r in records}
        for row in interactions:
            query = by_id[row.query_id]
            for doc_id in row.positive_ids:
                assert by_id[doc_id].latent_topic == query.latent_topic

    def test_positive_negative_disjoint(self, small_corpus):
        _, interactions = small_corpus
        for row in interactions:
            assert not set(row.positive_ids) & set(row.negative_ids)

    def test_every_query_has_geo_eligible_positive(self, small_corpus):
        records, interactions = small_corpus
        by_id = {r.id: r for r in records}
        for row in interactions:
            query = by_id[row.query_id]
            assert any(
                by_id[d].geo_cell == query.geo_cell for d in row.positive_ids
            )

    def test_token_budgets(self, small_corpus):
        records, _ = small_corpus
        for record in records:
            blob = serialize_structured(record)
            limit = QUERY_MAX_TOKENS if record.kind == "query" else DOC_MAX_TOKENS
            assert len(tokenize(blob)) <= limit

    def test_invalid_spec_counts_rejected(self):
        with pytest.raises(ConfigError):
            generate_corpus(CorpusSpec(docs_per_vertical=5))
        with pytest.raises(ConfigError):
            generate_corpus(CorpusSpec(queries_per_market=3))


class TestSerialization:
    def test_structured_contains_field_names_plain_does_not(self):
        record = CorpusRecord(
            id="x1", kind="store", market="CAN", language="EN",
            fields=(("category", "food"), ("name", "Taco Bar")), geo_cell=0,
        )
        structured = serialize_structured(record)
        plain = serialize_plain(record)
        assert '"name"' in structured
        assert "name" not in plain
        assert "Taco Bar" in plain

    def test_round_trip_idempotent(self, small_corpus):
        records, _ = small_corpus
        for record in records[:50]:
            blob = serialize_structured(record)
            again = serialize_structured(parse_structured(blob))
            assert blob == again

    def test_insertion_order_does_not_matter(self):
        a = CorpusRecord(
            id="x", kind="dish", market="GBR", language="EN",
            fields=(("name", "pie"), ("category", "bakery")), geo_cell=1,
        )
        b = CorpusRecord(
            id="x", kind="dish", market="GBR", language="EN",
            fields=(("category", "bakery"), ("name", "pie")), geo_cell=1,
        )
        assert serialize_structured(a) == serialize_structured(b)

    def test_control_characters_rejected(self):
        record = CorpusRecord(
            id="x", kind="dish", market="GBR", language="EN",
            fields=(("name", "bad\x01value"), ("category", "c")), geo_cell=0,
        )
        with pytest.raises(EncodeError):
            serialize_structured(record)

    def test_duplicate_field_names_rejected(self):
        with pytest.raises(ContractViolation):
            CorpusRecord(
                id="x", kind="dish", market="GBR", language="EN",
                fields=(("name", "a"), ("name", "b"), ("category", "c")), geo_cell=0,
            )

    def test_required_fields_enforced(self):
        with pytest.raises(ContractViolation):
            CorpusRecord(
                id="x", kind="query", market="GBR", language="EN",
                fields=(("search_term", "pie"),), geo_cell=0,
            )

    def test_unicode_round_trip(self):
        record = CorpusRecord(
            id="x", kind="item", market="TWN", language="ZH-TW",
            fields=(("category", "飲品"), ("name", "珍珠 奶茶")), geo_cell=3,
        )
        parsed = parse_structured(serialize_structured(record))
        assert parsed.field_map()["name"] == "珍珠 奶茶"


class TestRebalance:
    def _rows(self, small_corpus):
        return small_corpus[1]

    def test_unbinding_cap_is_identity(self, small_corpus):
        records, rows = small_corpus
        out = rebalance(rows, math.inf, language_vertical_key(records), seed=0)
        assert out == list(rows)

    def test_cap_binds_exactly(self, small_corpus):
        records, rows = small_corpus
        key = language_vertical_key(records)
        out = rebalance(rows, 3, key, seed=0)
        groups = {}
        for row in out:
            groups[key(row)] = groups.get(key(row), 0) + 1
        assert all(count <= 3 for count in groups.values())
        assert any(count == 3 for count in groups.values())

    def test_deterministic_selection(self, small_corpus):
        records, rows = small_corpus
        key = language_vertical_key(records)
        assert rebalance(rows, 4, key, seed=5) == rebalance(rows, 4, key, seed=5)

    def test_relative_order_preserved(self, small_corpus):
        records, rows = small_corpus
        out = rebalance(rows, 2, language_vertical_key(records), seed=1)
        positions = {row: i for i, row in enumerate(rows)}
        indices = [positions[row] for row in out]
        assert indices == sorted(indices)

    def test_positive_caps_required(self, small_corpus):
        records, rows = small_corpus
        with pytest.raises(ConfigError):
            rebalance(rows, 0, language_vertical_key(records))


class TestOracle:
    def test_same_topic_other_vertical_is_hard_negative(self, small_corpus):
        """Evaluate the oracle rules directly on a constructed pair."""
        records, _ = small_corpus
        by_id = {r.id: r for r in records}
        oracle = RelevanceOracle(seed=0)
        queries = [r for r in records if r.kind == "query"]
        found = False
        for query in queries:
            for doc in records:
                if (
                    doc.kind not in ("query", query.vertical)
                    and doc.latent_topic == query.latent_topic
                ):
                    assert oracle.label(query, doc) == "hard_negative"
                    found = True
                    break
            if found:
                break
        assert found, "corpus should contain same-topic cross-vertical docs"

    def test_same_topic_same_vertical_is_hard_positive(self, small_corpus):
        records, interactions = small_corpus
        by_id = {r.id: r for r in records}
        oracle = RelevanceOracle(seed=0)
        row = interactions[0]
        query = by_id[row.query_id]
        assert oracle.label(query, by_id[row.positive_ids[0]]) == "hard_positive"

    def test_oracle_requires_latent_topics(self, small_corpus):
        records, _ = small_corpus
        query = next(r for r in records if r.kind == "query")
        doc = next(r for r in records if r.kind != "query")
        stripped = CorpusRecord(
            id=doc.id, kind=doc.kind, market=doc.market, language=doc.language,
            fields=doc.fields, geo_cell=doc.geo_cell, latent_topic=None,
        )
        with pytest.raises(OracleError):
            RelevanceOracle(seed=0).label(query, stripped)

    def test_oracle_is_deterministic(self, small_corpus):
        records, _ = small_corpus
        query = next(r for r in records if r.kind == "query")
        docs = [r for r in records if r.kind != "query"][:30]
        oracle = RelevanceOracle(seed=3)
        labels1 = [oracle.label(query, d) for d in docs]
        labels2 = [oracle.label(query, d) for d in docs]
        assert labels1 == labels2


class TestMining:
    def test_negatives_are_confusable_hard_negatives(self, small_corpus):
        records, interactions = small_corpus
        by_id = {r.id: r for r in records}
        oracle = RelevanceOracle(seed=1)
        mined = mine_hard_examples(records, interactions, oracle)
        checked = 0
        for qid, sets in mined.items():
            query = by_id[qid]
            q_tokens = set(tokenize(query.field_map()["search_term"]))
            for doc_id in sets.negative_ids:
                doc = by_id[doc_id]
                assert oracle.label(query, doc) == "hard_negative"
                doc_tokens = set()
                for _, value in doc.fields:
                    doc_tokens.update(tokenize(value))
                assert q_tokens & doc_tokens
                checked += 1
        assert checked > 0

    def test_positives_superset_of_confirmed_logged(self, small_corpus):
        records, interactions = small_corpus
        by_id = {r.id: r for r in records}
        oracle = RelevanceOracle(seed=1)
        floor = 0.05
        mined = mine_hard_examples(records, interactions, oracle, rate_floor=floor)
        for row in interactions:
            confirmed = {
                doc_id
                for doc_id, rate in zip(row.positive_ids, row.weights)
                if rate >= floor
                and oracle.label(by_id[row.query_id], by_id[doc_id]) == "hard_positive"
            }
            assert confirmed <= set(mined[row.query_id].positive_ids)

    def test_rate_floor_drops_outliers(self, small_corpus):
        records, interactions = small_corpus
        oracle = RelevanceOracle(seed=1)
        low = next(
            (row, doc_id)
            for row in interactions
            for doc_id, rate in zip(row.positive_ids, row.weights)
            if rate < 0.5
        )
        mined = mine_hard_examples(
            records, interactions, oracle, rate_floor=0.999, pos_cap=0
        )
        row, doc_id = low
        assert doc_id not in mined[row.query_id].positive_ids

    def test_mined_sets_disjoint(self, small_corpus):
        records, interactions = small_corpus
        mined = mine_hard_examples(records, interactions, RelevanceOracle(seed=1))
        for sets in mined.values():
            assert not set(sets.positive_ids) & set(sets.negative_ids)

    def test_mining_deterministic(self, small_corpus):
        records, interactions = small_corpus
        oracle = RelevanceOracle(seed=4)
        assert mine_hard_examples(records, interactions, oracle) == mine_hard_examples(
            records, interactions, oracle
        )


class TestFiles:
    def test_corpus_round_trip(self, small_corpus, tmp_path):
        records, interactions = small_corpus
        write_corpus(tmp_path / "corpus.jsonl", records, SMALL_SPEC)
        write_truth(tmp_path / "truth.jsonl", records, SMALL_SPEC.seed)
        write_interactions(tmp_path / "rows.jsonl", interactions, SMALL_SPEC.seed)
        loaded, header = read_corpus(tmp_path / "corpus.jsonl", tmp_path / "truth.jsonl")
        assert header["seed"] == SMALL_SPEC.seed
        assert [r.id for r in loaded] == [r.id for r in records]
        assert all(a.latent_topic == b.latent_topic for a, b in zip(loaded, records))
        rows, _ = read_interactions(tmp_path / "rows.jsonl")
        assert rows == list(interactions)

    def test_header_carries_schema_and_seed(self, small_corpus, tmp_path):
        records, _ = small_corpus
        write_corpus(tmp_path / "c.jsonl", records, SMALL_SPEC)
        first = open(tmp_path / "c.jsonl", encoding="utf-8").readline()
        header = json.loads(first)
        assert header["schema"] == 1 and header["seed"] == SMALL_SPEC.seed

    def test_wrong_file_type_rejected(self, small_corpus, tmp_path):
        records, interactions = small_corpus
        write_interactions(tmp_path / "rows.jsonl", interactions, 0)
        with pytest.raises(EncodeError):
            read_corpus(tmp_path / "rows.jsonl")
