"""Directional study: field-aware structured input vs plain value text."""

from semretrieve.ablations import study_input_format
from semretrieve.corpus import CorpusSpec
from semretrieve.trainer import ModelBuildConfig, TrainConfig


def test_structured_input_dominates_plain():
    """Structured mode achieves at least plain-mode hit rate (non-strict)."""
    spec = CorpusSpec(
        docs_per_vertical=150, queries_per_market=30, seed=21,
        cells_per_market=2, topics_per_market=10, mention_rate=0.6,
    )
    build = ModelBuildConfig(num_buckets=2**13, hidden_dim=96, out_dim=64)
    cfg = TrainConfig(stage="infonce", batch_size=64, lr=2e-3, max_steps=300, seed=6)
    result = study_input_format(spec, cfg, build)
    assert result["structured"]["hit@10"] >= result["plain"]["hit@10"], result["table"]
    assert "structured" in result["table"]
