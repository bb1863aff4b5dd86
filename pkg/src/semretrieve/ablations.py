"""Named ablation studies, each emitting a comparison table.

Studies are keyed by letter: B input format (structured vs plain), D nested
prefix cuts vs a dedicated fixed projection, E loss/batch-size sensitivity,
F re-rank lift of the learned head over the dot product. Each study trains
its own models from a seeded config, so results are reproducible from the
command line alone.
"""

from __future__ import annotations

import numpy as np

from .ann import VectorStore
from .corpus import CorpusSpec, RelevanceOracle, generate_corpus, mine_hard_examples
from .evalharness import EvalRunConfig, build_eval_set, run_protocol
from .losses import hit_at_k
from .reranker import FfnHead, HeadTrainConfig, RerankConfig, retrieve_rerank, train_head
from .towers import encode_records
from .trainer import ModelBuildConfig, TrainConfig, TrainData, train_stage1

SIGLIP_INIT_TEMP = {512: 0.03, 384: 0.03, 192: 0.06, 128: 0.10, 64: 0.10}


def _split(interactions, fraction: float, seed: int):
    qids = sorted({r.query_id for r in interactions})
    rng = np.random.Generator(np.random.PCG64(seed))
    held = rng.choice(len(qids), size=int(len(qids) * fraction), replace=False)
    holdout = {qids[i] for i in held}
    return [r for r in interactions if r.query_id not in holdout], holdout


def _proxy_hit10(artifact, records, holdout, interactions):
    by_id = {r.id: r for r in records}
    pairs = [
        (by_id[row.query_id], by_id[row.positive_ids[0]])
        for row in interactions
        if row.query_id in holdout
    ]
    hasher = artifact.hasher()
    q = encode_records(artifact.query_tower, hasher, [a for a, _ in pairs])
    d = encode_records(artifact.doc_tower, hasher, [b for _, b in pairs])
    return hit_at_k(q @ d.T, np.arange(len(pairs)), min(10, len(pairs)))


def _recall(artifact, records, holdout, cut: int, k: int):
    eval_set, coverage = build_eval_set(records, holdout_query_ids=holdout)
    docs = [r for r in records if r.kind != "query"]
    vectors = encode_records(artifact.doc_tower, artifact.hasher(), docs)
    report = run_protocol(
        artifact, [d.id for d in docs], vectors, artifact.tte_id, records,
        eval_set, coverage, EvalRunConfig(ks=(k,), cut=cut),
    )
    return report.recall(k)


def study_input_format(
    spec: CorpusSpec, base_train: TrainConfig, build: ModelBuildConfig,
    holdout_fraction: float = 0.4, holdout_seed: int = 1,
) -> dict:
    """Ablation B: structured field-aware input vs plain value text."""
    records, interactions = generate_corpus(spec)
    train_rows, holdout = _split(interactions, holdout_fraction, holdout_seed)
    results = {}
    for mode in ("structured", "plain"):
        mode_build = ModelBuildConfig.from_dict({**build.to_dict(), "input_mode": mode})
        data = TrainData(records=records, interactions=train_rows, corpus_fingerprint=mode)
        artifact, _ = train_stage1(data, base_train, mode_build)
        results[mode] = {
            "hit@10": _proxy_hit10(artifact, records, holdout, interactions),
            "recall@20": _recall(artifact, records, holdout, build.out_dim, 20),
        }
    table = ["study B: input format", f"{'mode':<12}{'H@10':>8}{'R@20':>8}"]
    for mode in ("structured", "plain"):
        row = results[mode]
        table.append(f"{mode:<12}{row['hit@10']:>8.3f}{row['recall@20']:>8.3f}")
    results["table"] = "\n".join(table) + "\n"
    return results


def study_mrl_vs_fc(
    spec: CorpusSpec, base_train: TrainConfig, build: ModelBuildConfig,
    cut: int = 16, holdout_fraction: float = 0.4, holdout_seed: int = 1,
) -> dict:
    """Ablation D: nested-prefix cuts vs a dedicated fixed projection head.

    Trains three models: the prefix-supervised model (evaluated at the full
    width and at ``cut``), a control trained at the full width only, and a
    fixed-projection variant whose output width is ``cut``.
    """
    records, interactions = generate_corpus(spec)
    train_rows, holdout = _split(interactions, holdout_fraction, holdout_seed)
    data = TrainData(records=records, interactions=train_rows, corpus_fingerprint="d")

    mrl_model, _ = train_stage1(data, base_train, build)
    control_build = build
    control_train = TrainConfig.from_dict(
        {**base_train.to_dict(), "mrl_train_cuts": [build.out_dim]}
    )
    control_model, _ = train_stage1(data, control_train, control_build)
    fc_build = ModelBuildConfig.from_dict({**build.to_dict(), "fc_head_dim": cut})
    fc_model, _ = train_stage1(data, base_train, fc_build)

    k = 200
    results = {
        "mrl_full": _recall(mrl_model, records, holdout, build.out_dim, k),
        "mrl_cut": _recall(mrl_model, records, holdout, cut, k),
        "control_full": _recall(control_model, records, holdout, build.out_dim, k),
        "control_cut": _recall(control_model, records, holdout, cut, k),
        "fc_cut": _recall(fc_model, records, holdout, cut, k),
    }
    results["mrl_retention"] = results["mrl_cut"] / results["mrl_full"]
    results["control_retention"] = results["control_cut"] / results["control_full"]
    table = [
        "study D: prefix cuts vs fixed projection (recall@200)",
        f"{'config':<22}{'R@200':>8}",
        f"{'MRL-' + str(build.out_dim):<22}{results['mrl_full']:>8.3f}",
        f"{'MRL-' + str(cut):<22}{results['mrl_cut']:>8.3f}",
        f"{'FC-' + str(cut):<22}{results['fc_cut']:>8.3f}",
        f"{'control-' + str(build.out_dim):<22}{results['control_full']:>8.3f}",
        f"{'control-' + str(cut) + ' (truncated)':<22}{results['control_cut']:>8.3f}",
    ]
    results["table"] = "\n".join(table) + "\n"
    return results


def study_loss_batch_sensitivity(
    spec: CorpusSpec, build: ModelBuildConfig,
    batch_sizes=(64, 128, 192, 384, 512),
    steps: int = 250, lr: float = 2e-3, seed: int = 5,
    holdout_fraction: float = 0.4, holdout_seed: int = 2,
) -> dict:
    """Ablation E: softmax vs pairwise-sigmoid loss across batch sizes."""
    records, interactions = generate_corpus(spec)
    train_rows, holdout = _split(interactions, holdout_fraction, holdout_seed)
    data = TrainData(records=records, interactions=train_rows, corpus_fingerprint="e")
    results = {}
    for loss in ("infonce", "siglip"):
        for bs in batch_sizes:
            cfg = TrainConfig(
                stage="infonce", loss=loss, batch_size=bs, lr=lr, max_steps=steps,
                seed=seed, siglip_init_temp=SIGLIP_INIT_TEMP.get(bs, 0.1),
            )
            artifact, _ = train_stage1(data, cfg, build)
            results[(loss, bs)] = _recall(artifact, records, holdout, build.out_dim, 20)
    biggest, smallest = max(batch_sizes), min(batch_sizes)
    results["degradation"] = {
        loss: results[(loss, biggest)] - results[(loss, smallest)]
        for loss in ("infonce", "siglip")
    }
    table = [
        "study E: loss vs batch size (recall@20)",
        f"{'loss':<10}{'batch':>7}{'init temp':>11}{'init bias':>11}{'R@20':>8}",
    ]
    for loss in ("infonce", "siglip"):
        for bs in batch_sizes:
            temp = "0.07" if loss == "infonce" else f"{SIGLIP_INIT_TEMP.get(bs, 0.1):.2f}"
            bias = "-" if loss == "infonce" else "-6"
            table.append(f"{loss:<10}{bs:>7}{temp:>11}{bias:>11}{results[(loss, bs)]:>8.3f}")
    table.append(
        "degradation (largest -> smallest batch): "
        + ", ".join(f"{k}={v:+.3f}" for k, v in results["degradation"].items())
    )
    results["table"] = "\n".join(table) + "\n"
    return results


def study_rerank_lift(
    spec: CorpusSpec, base_train: TrainConfig, build: ModelBuildConfig,
    head_config: HeadTrainConfig | None = None,
    mining: dict | None = None,
    k: int = 200, expansion: int = 10,
    holdout_fraction: float = 0.4, holdout_seed: int = 1,
) -> dict:
    """Ablation F: two-step retrieve-then-rerank vs plain dot product."""
    records, interactions = generate_corpus(spec)
    train_rows, holdout = _split(interactions, holdout_fraction, holdout_seed)
    data = TrainData(records=records, interactions=train_rows, corpus_fingerprint="f")
    encoder, _ = train_stage1(data, base_train, build)

    mining = mining or {}
    oracle = RelevanceOracle(seed=int(mining.get("oracle_seed", 1)))
    mined = mine_hard_examples(
        records, interactions, oracle,
        neg_per_pos=int(mining.get("neg_per_pos", 2)),
        rate_floor=float(mining.get("rate_floor", 0.05)),
        pos_cap=int(mining.get("pos_cap", 64)),
    )
    docs = [r for r in records if r.kind != "query"]
    queries = [r for r in records if r.kind == "query"]
    hasher = encoder.hasher()
    doc_vecs = encode_records(encoder.doc_tower, hasher, docs)
    query_vecs = encode_records(encoder.query_tower, hasher, queries)
    qi = {q.id: i for i, q in enumerate(queries)}
    di = {d.id: i for i, d in enumerate(docs)}
    mined_train = {
        q: m for q, m in mined.items()
        if q not in holdout and m.positive_ids and m.negative_ids
    }
    pair_rows = [
        (qi[q], di[d]) for q in sorted(mined_train) for d in mined_train[q].positive_ids
    ]
    mined_pairs = {
        qi[q]: ([di[d] for d in m.positive_ids], [di[d] for d in m.negative_ids])
        for q, m in mined_train.items()
    }
    head = FfnHead.create(
        cut=build.out_dim, hidden=8 * build.out_dim, dropout_rate=0.0, seed=5
    )
    checksum = encoder.query_tower.checksum() + encoder.doc_tower.checksum()
    train_head(
        head, query_vecs, doc_vecs, pair_rows, mined_pairs,
        head_config or HeadTrainConfig(),
        encoder_checksum=checksum,
        encoder_checksum_fn=lambda: encoder.query_tower.checksum()
        + encoder.doc_tower.checksum(),
    )

    eval_set, _ = build_eval_set(records, holdout_query_ids=holdout)
    from .evalharness import build_candidate_set, candidate_index

    index = candidate_index(records)
    store = VectorStore(ids=tuple(d.id for d in docs), matrix=doc_vecs)
    cfg_r = RerankConfig(k=k, expansion=expansion, cut=build.out_dim)
    base, reranked = [], []
    for eq in eval_set:
        qv = query_vecs[qi[eq.query_id]]
        candidates = build_candidate_set(index, eq)
        dot = retrieve_rerank(store, None, qv, cfg_r, candidate_ids=candidates)
        rer = retrieve_rerank(store, head, qv, cfg_r, candidate_ids=candidates)
        pos = set(eq.positives)
        base.append(len({i for i, _ in dot} & pos) / len(pos))
        reranked.append(len({i for i, _ in rer} & pos) / len(pos))
    results = {
        "dot": float(np.mean(base)),
        "reranked": float(np.mean(reranked)),
        "head": head,
        "encoder": encoder,
    }
    results["lift_pct"] = 100.0 * (results["reranked"] - results["dot"]) / results["dot"]
    table = [
        f"study F: rerank lift (recall@{k}, pool {expansion}x)",
        f"{'scorer':<14}{'R@' + str(k):>8}",
        f"{'dot product':<14}{results['dot']:>8.4f}",
        f"{'ffn rerank':<14}{results['reranked']:>8.4f}",
        f"lift: {results['lift_pct']:+.2f}%",
    ]
    results["table"] = "\n".join(table) + "\n"
    return results
