"""Feature hashing, encoding, prefix cuts, freezing, and model artifacts."""

import numpy as np
import pytest

from semretrieve.autodiff import AdamState, Tape, adam_step
from semretrieve.corpus import serialize_plain, serialize_structured
from semretrieve.errors import ConfigError, EncodeError, IndexFormatError
from semretrieve.towers import (
    FeatureHasher,
    HasherConfig,
    ModelArtifact,
    TowerParams,
    encode,
    encode_records,
    fixed_projection_head,
    freeze_boundary,
    record_blob,
    truncate_mrl,
)


@pytest.fixture(scope="module")
def hasher():
    return FeatureHasher(HasherConfig(num_buckets=2**12))


@pytest.fixture(scope="module")
def tower():
    return TowerParams.create(seed=1, num_buckets=2**12, hidden_dim=48, out_dim=32, prefix="q")


def _blob(record):
    return serialize_structured(record)


class TestFeatureHasher:
    def test_same_blob_same_features(self, small_corpus, hasher):
        records, _ = small_corpus
        blob = _blob(records[0])
        idx1, val1 = hasher.features(blob)
        idx2, val2 = hasher.features(blob)
        assert np.array_equal(idx1, idx2) and np.array_equal(val1, val2)

    def test_plain_mode_drops_field_names(self, small_corpus):
        records, _ = small_corpus
        record = records[0]
        structured = FeatureHasher(HasherConfig(num_buckets=2**12, mode="structured"))
        plain = FeatureHasher(HasherConfig(num_buckets=2**12, mode="plain"))
        s_idx, _ = structured.features(serialize_structured(record))
        p_idx, _ = plain.features(serialize_plain(record))
        # structured mode hashes composite keys on top of bare tokens
        assert len(s_idx) > len(p_idx)

    def test_empty_token_set_rejected(self, hasher):
        plain = FeatureHasher(HasherConfig(num_buckets=2**12, mode="plain"))
        with pytest.raises(EncodeError):
            plain.features("   .,;  ")

    def test_structured_mode_requires_canonical_blob(self, hasher):
        with pytest.raises(EncodeError):
            hasher.features("not json at all")

    def test_values_unit_norm(self, small_corpus, hasher):
        records, _ = small_corpus
        _, vals = hasher.features(_blob(records[3]))
        assert np.linalg.norm(vals) == pytest.approx(1.0, abs=1e-6)

    def test_buckets_power_of_two(self):
        with pytest.raises(ConfigError):
            HasherConfig(num_buckets=1000)

    def test_max_tokens_cap(self):
        capped = FeatureHasher(HasherConfig(num_buckets=2**12, mode="plain", max_tokens=3))
        idx, _ = capped.features("a b c d e f g")
        assert len(idx) <= 3


class TestEncode:
    def test_unit_norm_and_determinism(self, small_corpus, hasher, tower):
        records, _ = small_corpus
        blob = _blob(records[0])
        v1 = encode(tower, hasher, blob)
        v2 = encode(tower, hasher, blob)
        assert np.array_equal(v1, v2)
        assert np.linalg.norm(v1) == pytest.approx(1.0, abs=1e-6)
        assert v1.dtype == np.float32

    def test_structured_vs_plain_differ(self, small_corpus, tower):
        records, _ = small_corpus
        record = records[0]
        s = encode(tower, FeatureHasher(HasherConfig(num_buckets=2**12)), _blob(record))
        p = encode(
            tower,
            FeatureHasher(HasherConfig(num_buckets=2**12, mode="plain")),
            serialize_plain(record),
        )
        assert not np.allclose(s, p)

    def test_batch_matches_single(self, small_corpus, hasher, tower):
        records, _ = small_corpus
        blobs = [_blob(r) for r in records[:5]]
        batch = encode_records(tower, hasher, records[:5])
        for i, blob in enumerate(blobs):
            np.testing.assert_allclose(batch[i], encode(tower, hasher, blob), atol=2e-6)

    def test_trained_model_ranks_positives(self, bundle):
        """cos(q, d+) > cos(q, d-) for at least 80% of held-out ground-truth triples.

        Positives come from the latent-topic assignments; negatives are drawn
        from the query's market among non-relevant documents.
        """
        art = bundle.stage1
        by_id = {r.id: r for r in bundle.records}
        di = {d.id: i for i, d in enumerate(bundle.docs)}
        by_market = {}
        for d in bundle.docs:
            by_market.setdefault(d.market, []).append(d.id)
        rng = np.random.default_rng(0)
        wins = total = 0
        for eq in bundle.eval_set:
            q = encode(art.query_tower, art.hasher(), _blob(by_id[eq.query_id]))
            positives = set(eq.positives)
            market_docs = by_market[eq.market]
            for _ in range(6):
                pos = eq.positives[rng.integers(len(eq.positives))]
                neg = market_docs[rng.integers(len(market_docs))]
                if neg in positives:
                    continue
                dpos = bundle.doc_vecs_stage1[di[pos]]
                dneg = bundle.doc_vecs_stage1[di[neg]]
                wins += int(q @ dpos > q @ dneg)
                total += 1
        assert total > 200
        assert wins / total >= 0.80, f"{wins}/{total}"


class TestTruncate:
    def test_identity_cut_bit_equal(self):
        v = np.random.default_rng(0).normal(size=32).astype(np.float32)
        v /= np.linalg.norm(v)
        out = truncate_mrl(v, 32, (8, 16, 32))
        assert np.array_equal(out, v)

    def test_basis_vector_prefix(self):
        v = np.zeros(32, np.float32)
        v[0] = 1.0
        out = truncate_mrl(v, 16, (16, 32))
        assert out.shape == (16,)
        assert out[0] == pytest.approx(1.0)

    def test_renormalized(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=32).astype(np.float32)
        v /= np.linalg.norm(v)
        out = truncate_mrl(v, 8, (8, 32))
        assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-6)

    def test_undeclared_cut_rejected(self):
        v = np.zeros(32, np.float32)
        with pytest.raises(ConfigError):
            truncate_mrl(v, 12, (8, 16, 32))


class TestFreeze:
    def test_all_layers_trainable(self):
        tower = TowerParams.create(seed=0, num_buckets=256, hidden_dim=8, out_dim=4)
        freeze_boundary(tower, len(tower.layers))
        assert not any(layer.frozen for layer in tower.layers)

    def test_out_of_range(self):
        tower = TowerParams.create(seed=0, num_buckets=256, hidden_dim=8, out_dim=4)
        with pytest.raises(ConfigError):
            freeze_boundary(tower, 0)
        with pytest.raises(ConfigError):
            freeze_boundary(tower, len(tower.layers) + 1)

    def test_frozen_layers_receive_no_updates(self, small_corpus):
        records, _ = small_corpus
        tower = TowerParams.create(seed=0, num_buckets=2**10, hidden_dim=16, out_dim=8)
        freeze_boundary(tower, 1)
        frozen_before = [
            np.ascontiguousarray(l.weight.data).tobytes() for l in tower.layers[:-1]
        ]
        hasher = FeatureHasher(HasherConfig(num_buckets=2**10))
        state = AdamState(lr=1e-2)
        from semretrieve import autodiff as ad
        from semretrieve.towers import batch_features

        feats = batch_features(hasher, [serialize_structured(r) for r in records[:8]])
        for _ in range(100):
            tape = Tape()
            out = tower.forward(tape, feats)
            loss = ad.mean_all(tape, ad.mul(tape, out, out))
            params = list(tower.trainable_tensors())
            for p in params:
                p.zero_grad()
            tape.backward(loss)
            adam_step(params, state)
        frozen_after = [
            np.ascontiguousarray(l.weight.data).tobytes() for l in tower.layers[:-1]
        ]
        assert frozen_before == frozen_after
        # and the unfrozen output layer did move
        assert state.step == 100


class TestFixedProjectionHead:
    def test_identity_init_matches_base(self, small_corpus, hasher, tower):
        records, _ = small_corpus
        variant = fixed_projection_head(tower, tower.out_dim)
        blob = _blob(records[0])
        np.testing.assert_allclose(
            encode(variant, hasher, blob), encode(tower, hasher, blob), atol=1e-6
        )

    def test_projected_width_and_norm(self, small_corpus, hasher, tower):
        records, _ = small_corpus
        variant = fixed_projection_head(tower, 8, seed=3)
        v = encode(variant, hasher, _blob(records[0]))
        assert v.shape == (8,)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-6)

    def test_width_beyond_output_rejected(self, tower):
        with pytest.raises(ConfigError):
            fixed_projection_head(tower, tower.out_dim + 1)


class TestModelArtifact:
    def _artifact(self):
        return ModelArtifact(
            query_model_id="qm-1",
            doc_model_id="dm-1",
            tte_id="tte-1",
            hasher_config=HasherConfig(num_buckets=2**10),
            query_tower=TowerParams.create(seed=1, num_buckets=2**10, hidden_dim=12, out_dim=8, prefix="q"),
            doc_tower=TowerParams.create(seed=2, num_buckets=2**10, hidden_dim=12, out_dim=8, prefix="d"),
            mrl_cuts=(4, 8),
        )

    def test_round_trip(self, small_corpus, tmp_path):
        records, _ = small_corpus
        artifact = self._artifact()
        path = tmp_path / "model.bin"
        artifact.save(path)
        loaded = ModelArtifact.load(path)
        assert loaded.tte_id == "tte-1" and loaded.mrl_cuts == (4, 8)
        hasher = loaded.hasher()
        blob = serialize_structured(records[0])
        np.testing.assert_array_equal(
            encode(loaded.query_tower, hasher, blob),
            encode(artifact.query_tower, artifact.hasher(), blob),
        )
        assert loaded.query_tower.checksum() == artifact.query_tower.checksum()

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "model.bin"
        self._artifact().save(path)
        data = bytearray(open(path, "rb").read())
        data[:4] = b"XXXX"
        open(path, "wb").write(bytes(data))
        with pytest.raises(IndexFormatError, match="magic"):
            ModelArtifact.load(path)

    def test_schema_version_rejected(self, tmp_path):
        path = tmp_path / "model.bin"
        self._artifact().save(path)
        data = bytearray(open(path, "rb").read())
        data[4] = 99
        open(path, "wb").write(bytes(data))
        with pytest.raises(IndexFormatError, match="schema"):
            ModelArtifact.load(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "model.bin"
        self._artifact().save(path)
        data = open(path, "rb").read()
        open(path, "wb").write(data[: len(data) - 64])
        with pytest.raises(IndexFormatError):
            ModelArtifact.load(path)

    def test_corrupted_block_rejected(self, tmp_path):
        path = tmp_path / "model.bin"
        self._artifact().save(path)
        data = bytearray(open(path, "rb").read())
        data[-32] ^= 0xFF
        open(path, "wb").write(bytes(data))
        with pytest.raises(IndexFormatError, match="checksum"):
            ModelArtifact.load(path)


def test_record_blob_selects_mode(small_corpus):
    records, _ = small_corpus
    assert record_blob(records[0], "structured").startswith("{")
    assert not record_blob(records[0], "plain").startswith("{")
