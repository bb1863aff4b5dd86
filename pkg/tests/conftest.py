"""Shared fixtures. The expensive trained-model bundle is session-scoped."""

import numpy as np
import pytest

from semretrieve import corpus as corpus_mod
from semretrieve import evalharness as eh
from semretrieve import trainer as tr
from semretrieve.towers import encode_records

SMALL_SPEC = corpus_mod.CorpusSpec(
    docs_per_vertical=40,
    queries_per_market=12,
    seed=11,
    cells_per_market=2,
    topics_per_market=6,
)

# the corpus every quality-sensitive check runs against; candidate sets are
# one market-vertical wide (~480 docs) so recall@200 stays discriminative
ACCEPT_SPEC = corpus_mod.CorpusSpec(
    docs_per_vertical=480,
    queries_per_market=60,
    seed=7,
    cells_per_market=1,
    topics_per_market=16,
    mention_rate=0.6,
)
ACCEPT_BUILD = tr.ModelBuildConfig(num_buckets=2**13, hidden_dim=96, out_dim=64)
ACCEPT_STAGE1 = tr.TrainConfig(
    stage="infonce", batch_size=128, lr=2e-3, max_steps=600, seed=3
)
ACCEPT_STAGE2 = tr.TrainConfig(
    stage="triplet_nce",
    batch_size=96,
    lr=5e-4,
    max_steps=40,
    seed=4,
    tau=0.07,
    triplet_tau=1.0,
    anchor_weight=1.0,
    neg_batch_factor=0.5,
)
HOLDOUT_FRACTION = 0.4
HOLDOUT_SEED = 1


def holdout_split(interactions, fraction=HOLDOUT_FRACTION, seed=HOLDOUT_SEED):
    qids = sorted({r.query_id for r in interactions})
    rng = np.random.Generator(np.random.PCG64(seed))
    held = rng.choice(len(qids), size=int(len(qids) * fraction), replace=False)
    holdout = {qids[i] for i in held}
    return [r for r in interactions if r.query_id not in holdout], holdout


@pytest.fixture(scope="session")
def small_corpus():
    records, interactions = corpus_mod.generate_corpus(SMALL_SPEC)
    return records, interactions


@pytest.fixture(scope="session")
def trained_small():
    """A quick stage-1 model for tests that need learned embeddings."""
    spec = corpus_mod.CorpusSpec(
        docs_per_vertical=120, queries_per_market=24, seed=13,
        cells_per_market=2, topics_per_market=10,
    )
    records, interactions = corpus_mod.generate_corpus(spec)
    train_rows, holdout = holdout_split(interactions)
    build = tr.ModelBuildConfig(num_buckets=2**13, hidden_dim=96, out_dim=64)
    cfg = tr.TrainConfig(stage="infonce", batch_size=64, lr=2e-3, max_steps=250, seed=2)
    data = tr.TrainData(records=records, interactions=train_rows, corpus_fingerprint="small")
    artifact, record = tr.train_stage1(data, cfg, build)
    return {
        "spec": spec,
        "records": records,
        "interactions": interactions,
        "train_rows": train_rows,
        "holdout": holdout,
        "artifact": artifact,
        "record": record,
        "build": build,
        "config": cfg,
    }


class AcceptanceBundle:
    """Everything derived from the acceptance corpus, built once per session."""

    def __init__(self):
        self.spec = ACCEPT_SPEC
        self.build = ACCEPT_BUILD
        self.records, self.interactions = corpus_mod.generate_corpus(self.spec)
        self.train_rows, self.holdout = holdout_split(self.interactions)
        self.docs = [r for r in self.records if r.kind != "query"]
        self.queries = [r for r in self.records if r.kind == "query"]
        self.doc_ids = [d.id for d in self.docs]
        self.eval_set, self.coverage = eh.build_eval_set(
            self.records, holdout_query_ids=self.holdout
        )

        data = tr.TrainData(
            records=self.records, interactions=self.train_rows, corpus_fingerprint="accept"
        )
        self.stage1, self.stage1_record = tr.train_stage1(data, ACCEPT_STAGE1, self.build)

        oracle = corpus_mod.RelevanceOracle(seed=1)
        self.mined = corpus_mod.mine_hard_examples(
            self.records, self.interactions, oracle, neg_per_pos=2, pos_cap=64
        )
        self.mined_train = {
            q: m for q, m in self.mined.items()
            if q not in self.holdout and m.positive_ids and m.negative_ids
        }
        self.mined_holdout = {
            q: m for q, m in self.mined.items()
            if q in self.holdout and m.positive_ids and m.negative_ids
        }
        data2 = tr.TrainData(
            records=self.records, interactions=self.train_rows,
            mined=self.mined_train, corpus_fingerprint="accept",
        )
        self.stage2, self.stage2_record = tr.train_stage2(data2, ACCEPT_STAGE2, self.stage1)

        hasher = self.stage1.hasher()
        self.doc_vecs_stage1 = encode_records(self.stage1.doc_tower, hasher, self.docs)
        self.query_vecs_stage1 = encode_records(self.stage1.query_tower, hasher, self.queries)
        hasher2 = self.stage2.hasher()
        self.doc_vecs_stage2 = encode_records(self.stage2.doc_tower, hasher2, self.docs)

        self._reports = {}
        self._control = None
        self._fc = None
        self._head = None

    def control_model(self):
        """Same architecture/训练 but supervised at the full width only."""
        if self._control is None:
            cfg = tr.TrainConfig.from_dict(
                {**ACCEPT_STAGE1.to_dict(), "mrl_train_cuts": [self.build.out_dim]}
            )
            data = tr.TrainData(
                records=self.records, interactions=self.train_rows,
                corpus_fingerprint="accept",
            )
            artifact, _ = tr.train_stage1(data, cfg, self.build)
            vecs = encode_records(artifact.doc_tower, artifact.hasher(), self.docs)
            self._control = (artifact, vecs)
        return self._control

    def fc_model(self):
        """Dedicated fixed-projection variant at width 16, trained to its plateau."""
        if self._fc is None:
            build = tr.ModelBuildConfig.from_dict(
                {**self.build.to_dict(), "fc_head_dim": 16}
            )
            cfg = tr.TrainConfig.from_dict({**ACCEPT_STAGE1.to_dict(), "max_steps": 900})
            data = tr.TrainData(
                records=self.records, interactions=self.train_rows,
                corpus_fingerprint="accept",
            )
            artifact, _ = tr.train_stage1(data, cfg, build)
            vecs = encode_records(artifact.doc_tower, artifact.hasher(), self.docs)
            self._fc = (artifact, vecs)
        return self._fc

    def rerank_head(self):
        """Prior-anchored head trained on the frozen stage-1 embeddings."""
        if self._head is None:
            from semretrieve.reranker import FfnHead, HeadTrainConfig, train_head

            qi = {q.id: i for i, q in enumerate(self.queries)}
            di = {d.id: i for i, d in enumerate(self.docs)}
            pair_rows = [
                (qi[q], di[d])
                for q in sorted(self.mined_train)
                for d in self.mined_train[q].positive_ids
            ]
            mined_pairs = {
                qi[q]: (
                    [di[d] for d in m.positive_ids],
                    [di[d] for d in m.negative_ids],
                )
                for q, m in self.mined_train.items()
            }
            # dropout off: mask noise inside the dot-product regression prior
            # costs about a point of recall at this scale
            head = FfnHead.create(
                cut=self.build.out_dim, hidden=512, dropout_rate=0.0, seed=5
            )
            encoder_checksum = (
                self.stage1.query_tower.checksum() + self.stage1.doc_tower.checksum()
            )
            record = train_head(
                head,
                self.query_vecs_stage1,
                self.doc_vecs_stage1,
                pair_rows,
                mined_pairs,
                HeadTrainConfig(seed=3),
                encoder_checksum=encoder_checksum,
                encoder_checksum_fn=lambda: self.stage1.query_tower.checksum()
                + self.stage1.doc_tower.checksum(),
            )
            self._head = (head, record)
        return self._head

    def report(self, artifact, doc_vecs, cut: int, precision: str = "fp32", ks=(20, 200)):
        key = (artifact.tte_id, cut, precision, tuple(ks))
        if key not in self._reports:
            self._reports[key] = eh.run_protocol(
                artifact, self.doc_ids, doc_vecs, artifact.tte_id, self.records,
                self.eval_set, self.coverage,
                eh.EvalRunConfig(ks=tuple(ks), cut=cut, precision=precision),
            )
        return self._reports[key]


@pytest.fixture(scope="session")
def bundle():
    return AcceptanceBundle()
