"""Desk-scale two-tower semantic retrieval.

Two-stage contrastive training over a synthetic multi-market corpus, nested
prefix embeddings served from graph indexes in float32 or int8, a small
learned re-ranking head, and an offline k-NN evaluation harness — every
approximate path verifiable against an exact brute-force oracle.
"""

__version__ = "0.1.0"
