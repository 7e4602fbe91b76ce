"""Graph test-time-training laboratory.

A self-contained stack for studying per-sample adaptation of graph
neural networks: a dense reverse-mode differentiation engine, TUDataset
ingestion with size-shifted splits, GCN/GIN/SGC models with a shared
extractor and separate task heads, hierarchical self-supervised
objectives, statistics-constrained test-time fine-tuning, representation
analysis via linear CKA, and numerical checks of the smoothness and
descent guarantees behind the method.
"""

__version__ = "0.1.0"
