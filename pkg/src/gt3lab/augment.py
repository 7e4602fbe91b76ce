"""Graph views for contrastive objectives.

Two families: a corruption view that shuffles attribute rows across nodes
(used as the negative for the global objective), and adaptive views that
drop unimportant edges and mask unimportant attribute dimensions, where
importance comes from degree-based statistics so that structurally
central parts of a graph are preserved more often.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphdata import Graph
from .tensor import DenseMatrix

_EPS = 1e-9


class NoEdgesError(ValueError):
    """Adaptive edge dropping is undefined on an edgeless graph."""


@dataclass(frozen=True)
class ViewSpec:
    kind: str = "adaptive"
    p_edge_base: float = 0.2
    p_attr_base: float = 0.2
    p_cut: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("raw", "adaptive"):
            raise ValueError(f"kind must be 'raw' or 'adaptive', got {self.kind!r}")
        for fname in ("p_edge_base", "p_attr_base", "p_cut"):
            val = getattr(self, fname)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{fname} must be in [0, 1], got {val}")


def shuffle_attributes(graph: Graph, seed: int) -> Graph:
    """Permute attribute rows uniformly at random; topology unchanged."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(graph.num_nodes)
    shuffled = graph.attributes.array[perm, :]
    return Graph(
        num_nodes=graph.num_nodes,
        edges=graph.edges,
        attributes=DenseMatrix.from_array(shuffled),
        label=graph.label,
    )


def edge_importance(graph: Graph) -> np.ndarray:
    """Mean endpoint degree per edge, aligned with graph.edges."""
    if not graph.edges:
        raise NoEdgesError("graph has no edges to score")
    deg = graph.degrees()
    return np.array([(deg[u] + deg[v]) / 2.0 for u, v in graph.edges])


def attribute_importance(graph: Graph) -> np.ndarray:
    """Degree-weighted mean absolute value per attribute dimension."""
    deg = graph.degrees()
    x = np.abs(graph.attributes.array)
    return (x * deg[:, None]).sum(axis=0) / graph.num_nodes


def _drop_probs(scores: np.ndarray, p_base: float, p_cut: float) -> np.ndarray:
    """Importance-to-probability map: mean importance gets p_base, the
    most important item gets 0, everything is capped at p_cut."""
    s_max = scores.max()
    s_mean = scores.mean()
    if s_max - s_mean < _EPS:
        return np.full(scores.shape, min(p_base, p_cut))
    raw = (s_max - scores) / (s_max - s_mean + _EPS) * p_base
    return np.minimum(raw, p_cut)


def adaptive_view(graph: Graph, spec: ViewSpec) -> Graph:
    """Drop edges and mask attribute dimensions, sparing important ones.

    Deterministic for a (graph, spec) pair. If the random draw would
    remove every edge, the single highest-importance edge is retained so
    the view never degenerates to an empty topology.
    """
    if spec.kind != "adaptive":
        raise ValueError(f"adaptive_view requires kind='adaptive', got {spec.kind!r}")
    e_scores = edge_importance(graph)
    rng = np.random.default_rng(spec.seed)

    p_edge = _drop_probs(e_scores, spec.p_edge_base, spec.p_cut)
    dropped = rng.random(len(graph.edges)) < p_edge
    if dropped.all():
        keep_idx = int(np.argmax(e_scores))
        dropped[keep_idx] = False
    edges = tuple(e for e, d in zip(graph.edges, dropped) if not d)

    a_scores = attribute_importance(graph)
    p_attr = _drop_probs(a_scores, spec.p_attr_base, spec.p_cut)
    masked = rng.random(graph.attr_dim) < p_attr
    attrs = graph.attributes.array.copy()
    attrs[:, masked] = 0.0

    return Graph(
        num_nodes=graph.num_nodes,
        edges=edges,
        attributes=DenseMatrix.from_array(attrs),
        label=graph.label,
    )
