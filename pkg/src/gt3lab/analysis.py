"""Representation comparison and evaluation metrics.

Linear centered kernel alignment (CKA) compares node-embedding matrices
layer by layer across models trained for different objectives; the AUC
implementation uses the rank-statistic formulation with midranks on tied
scores so it matches the exhaustive pairwise definition exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .graphdata import Graph
from .models import ParamSnapshot, gnn_forward, make_leaves
from .tensor import DenseMatrix, ShapeError


def _as_array(x) -> np.ndarray:
    if isinstance(x, DenseMatrix):
        return np.array(x.array)
    return np.asarray(x, dtype=np.float64)


def linear_cka(x, y) -> float:
    """Linear CKA between two representation matrices with shared rows.

    Columns are centered first; the score is ||Y_c^T X_c||_F^2 divided by
    ||X_c^T X_c||_F * ||Y_c^T Y_c||_F. Defined as 0 when either centered
    matrix is entirely zero. Invariant to orthogonal right-multiplication
    and positive isotropic scaling of either argument.
    """
    xa, ya = _as_array(x), _as_array(y)
    if xa.ndim != 2 or ya.ndim != 2:
        raise ShapeError("linear_cka expects 2-D matrices")
    if xa.shape[0] != ya.shape[0]:
        raise ShapeError(
            f"row counts differ: {xa.shape[0]} vs {ya.shape[0]}"
        )
    xc = xa - xa.mean(axis=0, keepdims=True)
    yc = ya - ya.mean(axis=0, keepdims=True)
    denom_x = np.linalg.norm(xc.T @ xc)
    denom_y = np.linalg.norm(yc.T @ yc)
    if denom_x == 0.0 or denom_y == 0.0:
        return 0.0
    num = np.linalg.norm(yc.T @ xc) ** 2
    return float(num / (denom_x * denom_y))


def accuracy(preds, labels) -> float:
    p, l = np.asarray(preds), np.asarray(labels)
    if p.shape != l.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {l.shape}")
    if p.size == 0:
        raise ValueError("accuracy of an empty prediction list is undefined")
    return float((p == l).mean())


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their ranks."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc_binary(scores, labels) -> float:
    """Probability that a positive outscores a negative, ties counted half.

    Computed from the rank-sum statistic with midranks, which equals the
    brute-force mean over all positive/negative pairs.
    """
    s = np.asarray(scores, dtype=np.float64)
    l = np.asarray(labels)
    if s.shape != l.shape or s.ndim != 1:
        raise ShapeError(f"scores {s.shape} and labels {l.shape} must be equal 1-D")
    n_pos = int((l == 1).sum())
    n_neg = int((l == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = _midranks(s)
    rank_sum = ranks[l == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class CkaRow:
    pair: str
    layer: int
    value: float


@dataclass(frozen=True)
class CkaReport:
    rows: tuple[CkaRow, ...]

    def value(self, pair: str, layer: int) -> float:
        for r in self.rows:
            if r.pair == pair and r.layer == layer:
                return r.value
        raise KeyError(f"no CKA entry for pair {pair!r} layer {layer}")

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["pair", "layer", "value"])
            for r in self.rows:
                writer.writerow([r.pair, r.layer, repr(r.value)])


def _layer_embeddings(
    snapshot: ParamSnapshot, graphs: list[Graph], layer: int
) -> np.ndarray:
    blocks = []
    for g in graphs:
        leaves = make_leaves(snapshot.params_copy())
        h = gnn_forward(g, leaves, snapshot.cfg, head="main", upto=layer)
        blocks.append(np.array(h.value.array))
    return np.concatenate(blocks, axis=0)


def layerwise_cka(
    tagged_models: list[tuple[str, ParamSnapshot]],
    probe_graphs: list[Graph],
) -> CkaReport:
    """CKA for every unordered model pair at every layer depth.

    All models must share the layer count; node embeddings are stacked
    across probe graphs in order, so every model sees the identical row
    layout. Pair names join the two tags with a hyphen in input order.
    """
    if len(tagged_models) < 2:
        raise ValueError("need at least two models to compare")
    if not probe_graphs:
        raise ValueError("need at least one probe graph")
    depths = {snap.cfg.num_layers for _, snap in tagged_models}
    if len(depths) != 1:
        raise ValueError(f"models disagree on layer count: {sorted(depths)}")
    num_layers = depths.pop()

    rows = []
    for layer in range(1, num_layers + 1):
        embs = {
            tag: _layer_embeddings(snap, probe_graphs, layer)
            for tag, snap in tagged_models
        }
        for (tag_a, _), (tag_b, _) in combinations(tagged_models, 2):
            rows.append(
                CkaRow(
                    pair=f"{tag_a}-{tag_b}",
                    layer=layer,
                    value=linear_cka(embs[tag_a], embs[tag_b]),
                )
            )
    return CkaReport(rows=tuple(rows))
