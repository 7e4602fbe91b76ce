"""Hierarchical self-supervised objectives and embedding statistics.

The self-supervised loss has two levels. The global term contrasts node
embeddings of the clean graph against an attribute-shuffled corruption
through a sigmoid bilinear discriminator against a graph summary vector.
The local term is a node-level InfoNCE across two adaptive views with a
projection MLP and cosine similarities, plus a decorrelation penalty that
pushes projected features toward orthonormality. The combined loss is
L_s = L_g + alpha * L_l and is what test-time adaptation minimizes,
together with a constraint tying the adapted embedding mean/covariance to
the training-set statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .augment import NoEdgesError, ViewSpec, adaptive_view, shuffle_attributes
from .graphdata import Graph
from .models import GnnConfig, gnn_forward
from .tensor import DenseMatrix, DiffNode

_PROB_FLOOR = 1e-7


class InsufficientSamplesError(ValueError):
    """Covariance statistics need at least two embeddings."""


@dataclass(frozen=True)
class SslWeights:
    """Loss weights; gamma scales L_s during joint training, lambda_c the
    statistics constraint during adaptation, alpha the local term inside
    L_s, beta_decor the decorrelation penalty, tau the InfoNCE
    temperature. use_global / use_local switch terms off for ablations."""

    gamma: float = 0.5
    alpha: float = 1.0
    beta_decor: float = 1e-3
    tau: float = 0.5
    lambda_c: float = 1.0
    use_global: bool = True
    use_local: bool = True

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for fname in ("gamma", "alpha", "beta_decor", "lambda_c"):
            if getattr(self, fname) < 0.0:
                raise ValueError(f"{fname} must be >= 0")


@dataclass(frozen=True)
class SslSeeds:
    """Per-sample seeds for the three stochastic views."""

    shuffle: int = 0
    view_a: int = 1
    view_b: int = 2


@dataclass(frozen=True)
class SslTerms:
    """Scalar values of the loss pieces for one graph, with the weights
    that produced them."""

    global_term: float
    local_term: float
    combined: float
    constraint: float
    weights: SslWeights


@dataclass(frozen=True)
class TrainStats:
    """Mean and unbiased covariance of graph-level extractor embeddings."""

    mu: DenseMatrix
    sigma: DenseMatrix
    n: int

    def __post_init__(self):
        d = self.mu.cols
        if self.mu.rows != 1:
            raise ValueError(f"mu must be a row vector, got {self.mu.shape}")
        if self.sigma.shape != (d, d):
            raise ValueError(f"sigma must be {d}x{d}, got {self.sigma.shape}")
        if self.n < 2:
            raise InsufficientSamplesError(f"need n >= 2 samples, got {self.n}")
        s = self.sigma.array
        if np.abs(s - s.T).max() > 1e-10:
            raise ValueError("sigma is not symmetric within 1e-10")
        if np.linalg.eigvalsh(s).min() < -1e-8:
            raise ValueError("sigma has an eigenvalue below -1e-8")


def global_contrastive_loss(
    z0: DiffNode, z1: DiffNode, leaves: dict[str, DiffNode]
) -> DiffNode:
    """Binary discrimination of clean vs corrupted node embeddings.

    The summary g0 is a sigmoid linear map of the mean clean embedding;
    the discriminator D(z, g0) = sigmoid(z . g0) should say 1 on clean
    rows and 0 on corrupted ones. Probabilities are clamped to
    [1e-7, 1 - 1e-7] before the logs.
    """
    if z0.value.shape != z1.value.shape:
        raise T.ShapeError(
            f"view shapes differ: {z0.value.shape} vs {z1.value.shape}"
        )
    n = z0.value.rows
    summary = T.sigmoid(
        T.add(T.matmul(T.mean_rows(z0), leaves["s.summary.w"]), leaves["s.summary.b"])
    )
    pos = T.sigmoid(T.matmul(z0, T.transpose(summary)))
    neg = T.sigmoid(T.matmul(z1, T.transpose(summary)))
    pos = T.clip(pos, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    neg = T.clip(neg, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    ones = T.constant(DenseMatrix.ones(n, 1))
    score = T.add(T.sum_all(T.log(pos)), T.sum_all(T.log(T.sub(ones, neg))))
    return T.scale(score, -1.0 / (2.0 * n))


def project(z: DiffNode, leaves: dict[str, DiffNode]) -> DiffNode:
    """Two-layer ReLU projection head used by the local objective."""
    inner = T.relu(T.add(T.matmul(z, leaves["s.proj.w1"]), leaves["s.proj.b1"]))
    return T.add(T.matmul(inner, leaves["s.proj.w2"]), leaves["s.proj.b2"])


def _pair_logvec(pa_n: DiffNode, pb_n: DiffNode, tau: float) -> DiffNode:
    """Per-node InfoNCE log-ratios for ordered views (a, b).

    Entry i is log of h(a_i, b_i) over h(a_i, b_i) plus all inter-view
    and intra-view negatives for node i, with h = exp(cos / tau) on the
    already-normalized projections.
    """
    n = pa_n.value.rows
    p = T.exp(T.scale(T.matmul(pa_n, T.transpose(pb_n)), 1.0 / tau))
    q = T.exp(T.scale(T.matmul(pa_n, T.transpose(pa_n)), 1.0 / tau))
    eye = T.constant(DenseMatrix.eye(n))
    col = T.constant(DenseMatrix.ones(n, 1))
    diag_p = T.matmul(T.mul(p, eye), col)
    diag_q = T.matmul(T.mul(q, eye), col)
    row_p = T.matmul(p, col)
    row_q = T.matmul(q, col)
    denom = T.sub(T.add(row_p, row_q), diag_q)
    return T.sub(T.log(diag_p), T.log(denom))


def local_pair_objective(
    z2: DiffNode,
    z3: DiffNode,
    index: int,
    leaves: dict[str, DiffNode],
    tau: float,
    strict: bool = False,
) -> DiffNode:
    """The ordered local log-ratio for a single node index."""
    n = z2.value.rows
    if not 0 <= index < n:
        raise ValueError(f"index {index} outside [0, {n})")
    pa_n = T.row_l2_normalize(project(z2, leaves), strict=strict)
    pb_n = T.row_l2_normalize(project(z3, leaves), strict=strict)
    vec = _pair_logvec(pa_n, pb_n, tau)
    pick = np.zeros((n, 1))
    pick[index, 0] = 1.0
    return T.sum_all(T.mul(vec, T.constant(DenseMatrix.from_array(pick))))


def decorrelation(zp: DiffNode) -> DiffNode:
    """|| Z'^T Z' - I ||_F^2 on projected (un-normalized) features."""
    d = zp.value.cols
    gram = T.matmul(T.transpose(zp), zp)
    return T.frobenius_sq(T.sub(gram, T.constant(DenseMatrix.eye(d))))


def local_contrastive_loss(
    z2: DiffNode,
    z3: DiffNode,
    leaves: dict[str, DiffNode],
    tau: float,
    beta_decor: float,
    strict: bool = False,
) -> DiffNode:
    """Symmetrized node-level InfoNCE plus decorrelation on both views."""
    if z2.value.shape != z3.value.shape:
        raise T.ShapeError(
            f"view shapes differ: {z2.value.shape} vs {z3.value.shape}"
        )
    n = z2.value.rows
    pa = project(z2, leaves)
    pb = project(z3, leaves)
    pa_n = T.row_l2_normalize(pa, strict=strict)
    pb_n = T.row_l2_normalize(pb, strict=strict)
    forward_vec = _pair_logvec(pa_n, pb_n, tau)
    backward_vec = _pair_logvec(pb_n, pa_n, tau)
    contrast = T.scale(
        T.add(T.sum_all(forward_vec), T.sum_all(backward_vec)), -1.0 / (2.0 * n)
    )
    penalty = T.scale(T.add(decorrelation(pa), decorrelation(pb)), beta_decor / 2.0)
    return T.add(contrast, penalty)


def _zero() -> DiffNode:
    return T.constant(DenseMatrix.zeros(1, 1))


def ssl_loss(
    graph: Graph,
    leaves: dict[str, DiffNode],
    cfg: GnnConfig,
    weights: SslWeights,
    seeds: SslSeeds,
    view_spec: ViewSpec | None = None,
) -> tuple[DiffNode, SslTerms]:
    """Combined self-supervised loss L_g + alpha * L_l for one graph.

    View generation: the global term corrupts by shuffling attributes
    with seeds.shuffle; the local term builds two adaptive views with
    seeds.view_a / seeds.view_b, falling back to the raw graph when the
    graph has no edges to drop.
    """
    if view_spec is None:
        view_spec = ViewSpec()
    z0 = gnn_forward(graph, leaves, cfg, head="ssl")

    if weights.use_global:
        corrupted = shuffle_attributes(graph, seeds.shuffle)
        z1 = gnn_forward(corrupted, leaves, cfg, head="ssl")
        global_node = global_contrastive_loss(z0, z1, leaves)
    else:
        global_node = None

    local_node = None
    if weights.use_local and weights.alpha > 0.0:
        try:
            view_a = adaptive_view(
                graph, ViewSpec(kind="adaptive", p_edge_base=view_spec.p_edge_base,
                                p_attr_base=view_spec.p_attr_base,
                                p_cut=view_spec.p_cut, seed=seeds.view_a)
            )
            view_b = adaptive_view(
                graph, ViewSpec(kind="adaptive", p_edge_base=view_spec.p_edge_base,
                                p_attr_base=view_spec.p_attr_base,
                                p_cut=view_spec.p_cut, seed=seeds.view_b)
            )
        except NoEdgesError:
            view_a = graph
            view_b = graph
        z2 = gnn_forward(view_a, leaves, cfg, head="ssl")
        z3 = gnn_forward(view_b, leaves, cfg, head="ssl")
        local_node = local_contrastive_loss(
            z2, z3, leaves, weights.tau, weights.beta_decor
        )

    if global_node is not None and local_node is not None:
        total = T.add(global_node, T.scale(local_node, weights.alpha))
    elif global_node is not None:
        total = global_node
    elif local_node is not None:
        total = T.scale(local_node, weights.alpha)
    else:
        total = _zero()

    terms = SslTerms(
        global_term=global_node.value.item() if global_node is not None else 0.0,
        local_term=local_node.value.item() if local_node is not None else 0.0,
        combined=total.value.item(),
        constraint=0.0,
        weights=weights,
    )
    return total, terms


def embedding_stats(embeddings) -> TrainStats:
    """Sample mean and unbiased covariance of 1 x d embeddings."""
    rows = []
    for e in embeddings:
        arr = e.array if isinstance(e, DenseMatrix) else np.asarray(e, dtype=np.float64)
        rows.append(arr.reshape(-1))
    if len(rows) < 2:
        raise InsufficientSamplesError(f"need >= 2 embeddings, got {len(rows)}")
    h = np.stack(rows, axis=0)
    mu = h.mean(axis=0, keepdims=True)
    centered = h - mu
    sigma = centered.T @ centered / (h.shape[0] - 1)
    sigma = (sigma + sigma.T) / 2.0
    return TrainStats(
        mu=DenseMatrix.from_array(mu),
        sigma=DenseMatrix.from_array(sigma),
        n=h.shape[0],
    )


def adaptation_constraint(train: TrainStats, test: TrainStats) -> float:
    """Squared L2 gap between means plus squared Frobenius gap between
    covariances."""
    if train.mu.shape != test.mu.shape:
        raise T.ShapeError(f"mu shapes differ: {train.mu.shape} vs {test.mu.shape}")
    dmu = train.mu.array - test.mu.array
    dsig = train.sigma.array - test.sigma.array
    return float((dmu * dmu).sum() + (dsig * dsig).sum())


def constraint_node(train: TrainStats, embeddings: list[DiffNode]) -> DiffNode:
    """Differentiable adaptation constraint from embedding nodes.

    The test-side statistics are built inside the tape so the constraint
    gradient reaches the extractor parameters through every embedding.
    """
    if len(embeddings) < 2:
        raise InsufficientSamplesError(
            f"need >= 2 embeddings, got {len(embeddings)}"
        )
    h = T.concat_rows(embeddings)
    n = h.value.rows
    mu = T.mean_rows(h)
    centered = T.add(h, T.scale(mu, -1.0))
    sigma = T.scale(T.matmul(T.transpose(centered), centered), 1.0 / (n - 1))
    dmu = T.sub(mu, T.constant(train.mu))
    dsig = T.sub(sigma, T.constant(train.sigma))
    return T.add(T.frobenius_sq(dmu), T.frobenius_sq(dsig))
