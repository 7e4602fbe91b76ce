"""GNN architectures over the differentiation tape.

Parameters live in a flat name -> ndarray dict. The name prefix encodes
the parameter group: "e." is the shared extractor (layers 1..K), "m." the
main branch (layers K+1..L plus the classification head), "s." the
self-supervised branch (layers K+1..L plus its summary and projection
heads). Test-time adaptation updates only the "e." and "s." groups.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .graphdata import Graph, normalize_adjacency
from .tensor import DenseMatrix, DiffNode

if TYPE_CHECKING:
    from .ssl import TrainStats

ARCHS = ("gcn", "gin", "sgc")
READOUTS = ("sum", "mean", "max")


class ConfigError(ValueError):
    """A configuration field is out of range or inconsistent."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or version-incompatible."""


@dataclass(frozen=True)
class GnnConfig:
    arch: str = "gcn"
    num_layers: int = 2
    hidden_dim: int = 16
    shared_layers: int = 1
    readout: str | None = None
    dropout_rate: float = 0.0
    layer_norm: bool = False
    num_classes: int = 2
    attr_dim: int = 1

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if not 0 <= self.shared_layers <= self.num_layers:
            raise ConfigError(
                f"shared_layers must be in [0, {self.num_layers}], "
                f"got {self.shared_layers}"
            )
        if self.readout is None:
            object.__setattr__(self, "readout", "max" if self.arch == "gin" else "sum")
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}, got {self.readout!r}")
        if self.arch == "sgc" and self.readout != "sum":
            raise ConfigError("sgc uses fixed sum pooling; set readout to 'sum'")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.attr_dim < 1:
            raise ConfigError(f"attr_dim must be >= 1, got {self.attr_dim}")

    @property
    def embed_dim(self) -> int:
        """Width of node embeddings after the GNN stack."""
        return self.attr_dim if self.arch == "sgc" else self.hidden_dim

    @property
    def extractor_dim(self) -> int:
        """Width of node embeddings after the shared layers only."""
        if self.arch == "sgc" or self.shared_layers == 0:
            return self.attr_dim
        return self.hidden_dim


class ModelParams:
    """Flat parameter store; arrays are plain writable float64 ndarrays."""

    def __init__(self, cfg: GnnConfig, arrays: dict[str, np.ndarray]) -> None:
        self.cfg = cfg
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _branch(layer: int, shared_layers: int, head: str) -> str:
    return "e" if layer <= shared_layers else ("m" if head == "main" else "s")


def init_params(cfg: GnnConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic for a seed.

    Branch layers above K are initialized for both the main and the ssl
    head so the two branches start from independent draws.
    """
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}

    def add_layer(prefix: str, layer: int, din: int, dout: int) -> None:
        if cfg.arch == "gcn":
            arrays[f"{prefix}.l{layer}.w"] = _glorot(rng, din, dout)
            arrays[f"{prefix}.l{layer}.b"] = np.zeros((1, dout))
        else:
            arrays[f"{prefix}.l{layer}.w1"] = _glorot(rng, din, cfg.hidden_dim)
            arrays[f"{prefix}.l{layer}.b1"] = np.zeros((1, cfg.hidden_dim))
            arrays[f"{prefix}.l{layer}.w2"] = _glorot(rng, cfg.hidden_dim, dout)
            arrays[f"{prefix}.l{layer}.b2"] = np.zeros((1, dout))

    if cfg.arch != "sgc":
        for layer in range(1, cfg.num_layers + 1):
            din = cfg.attr_dim if layer == 1 else cfg.hidden_dim
            if layer <= cfg.shared_layers:
                add_layer("e", layer, din, cfg.hidden_dim)
            else:
                add_layer("m", layer, din, cfg.hidden_dim)
                add_layer("s", layer, din, cfg.hidden_dim)

    d = cfg.embed_dim
    if cfg.arch == "sgc":
        arrays["m.head.w"] = _glorot(rng, d, cfg.num_classes)
    else:
        arrays["m.head.w"] = _glorot(rng, d, cfg.num_classes)
        arrays["m.head.b"] = np.zeros((1, cfg.num_classes))
    arrays["s.summary.w"] = _glorot(rng, d, d)
    arrays["s.summary.b"] = np.zeros((1, d))
    arrays["s.proj.w1"] = _glorot(rng, d, d)
    arrays["s.proj.b1"] = np.zeros((1, d))
    arrays["s.proj.w2"] = _glorot(rng, d, d)
    arrays["s.proj.b2"] = np.zeros((1, d))
    return ModelParams(cfg, arrays)


def make_leaves(params: ModelParams) -> dict[str, DiffNode]:
    """Fresh leaf nodes for one forward/backward pass."""
    return {k: T.leaf(DenseMatrix.from_array(v)) for k, v in params.arrays.items()}


def collect_grads(leaves: dict[str, DiffNode]) -> dict[str, np.ndarray]:
    grads = {}
    for name, node in leaves.items():
        grads[name] = (
            np.zeros_like(node.value.array) if node._grad is None else node._grad.copy()
        )
    return grads


def _propagation(graph: Graph, cfg: GnnConfig) -> DenseMatrix:
    scheme = "raw_selfloop" if cfg.arch == "gin" else "sym_selfloop"
    return normalize_adjacency(graph, scheme)


def _dropout(h: DiffNode, rate: float, rng: np.random.Generator) -> DiffNode:
    keep = (rng.random(h.value.shape) >= rate) / (1.0 - rate)
    return T.mul(h, T.constant(DenseMatrix.from_array(keep)))


def gnn_forward(
    graph: Graph,
    leaves: dict[str, DiffNode],
    cfg: GnnConfig,
    head: str = "main",
    upto: int | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> DiffNode:
    """Node embeddings after `upto` layers along the given head's branch.

    Layer order is transform, ReLU, layer norm (optional), dropout
    (training only). For sgc the stack is the parameter-free propagation
    A^L X, identical for both heads.
    """
    if head not in ("main", "ssl"):
        raise ValueError(f"head must be 'main' or 'ssl', got {head!r}")
    upto = cfg.num_layers if upto is None else upto
    if not 0 <= upto <= cfg.num_layers:
        raise ValueError(f"upto must be in [0, {cfg.num_layers}], got {upto}")
    if training and cfg.dropout_rate > 0.0 and rng is None:
        raise ValueError("training-mode dropout needs an rng")

    if cfg.arch == "sgc":
        prop = normalize_adjacency(graph, "sym_selfloop").array
        h = graph.attributes.array
        for _ in range(cfg.num_layers):
            h = prop @ h
        return T.constant(DenseMatrix.from_array(h))

    a_hat = T.constant(_propagation(graph, cfg))
    h = T.constant(graph.attributes)
    for layer in range(1, upto + 1):
        prefix = _branch(layer, cfg.shared_layers, head)
        agg = T.matmul(a_hat, h)
        if cfg.arch == "gcn":
            w = leaves[f"{prefix}.l{layer}.w"]
            b = leaves[f"{prefix}.l{layer}.b"]
            h = T.relu(T.add(T.matmul(agg, w), b))
        else:
            inner = T.relu(
                T.add(T.matmul(agg, leaves[f"{prefix}.l{layer}.w1"]),
                      leaves[f"{prefix}.l{layer}.b1"])
            )
            pre = T.add(T.matmul(inner, leaves[f"{prefix}.l{layer}.w2"]),
                        leaves[f"{prefix}.l{layer}.b2"])
            h = T.relu(pre)
        if cfg.layer_norm:
            h = T.row_layernorm(h)
        if training and cfg.dropout_rate > 0.0:
            h = _dropout(h, cfg.dropout_rate, rng)
    return h


def readout_node(h: DiffNode, kind: str) -> DiffNode:
    if kind == "sum":
        return T.sum_rows(h)
    if kind == "mean":
        return T.mean_rows(h)
    if kind == "max":
        return T.max_rows(h)
    raise ValueError(f"unknown readout {kind!r}")


def extractor_embedding(
    graph: Graph, leaves: dict[str, DiffNode], cfg: GnnConfig
) -> DiffNode:
    """Graph-level readout of the shared extractor's node embeddings."""
    h = gnn_forward(graph, leaves, cfg, head="main", upto=cfg.shared_layers)
    return readout_node(h, cfg.readout)


def classify(
    graph: Graph,
    leaves: dict[str, DiffNode],
    cfg: GnnConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> DiffNode:
    """Logits (1 x C) from the main branch."""
    h = gnn_forward(graph, leaves, cfg, head="main", training=training, rng=rng)
    r = readout_node(h, cfg.readout)
    if cfg.arch == "sgc":
        return T.matmul(r, leaves["m.head.w"])
    return T.add(T.matmul(r, leaves["m.head.w"]), leaves["m.head.b"])


def sgc_forward(graph: Graph, theta: DiffNode, num_hops: int,
                scheme: str = "sym_selfloop") -> DiffNode:
    """Simplified graph convolution logits 1^T A^L X theta."""
    prop = normalize_adjacency(graph, scheme).array
    h = graph.attributes.array
    for _ in range(num_hops):
        h = prop @ h
    pooled = T.sum_rows(T.constant(DenseMatrix.from_array(h)))
    return T.matmul(pooled, theta)


def main_loss(logits: DiffNode, label: int, num_classes: int) -> DiffNode:
    """Cross-entropy -log softmax(logits)[label], computed via a stable
    log-sum-exp so extreme logits cannot push softmax outputs to 0."""
    if logits.value.shape != (1, num_classes):
        raise T.ShapeError(
            f"logits must be 1x{num_classes}, got {logits.value.shape}"
        )
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} outside [0, {num_classes})")
    zmax = float(logits.value.array.max())
    shift = T.constant(DenseMatrix.from_array(np.full((1, num_classes), -zmax)))
    lse = T.add(
        T.log(T.sum_all(T.exp(T.add(logits, shift)))),
        T.constant(DenseMatrix(1, 1, [[zmax]])),
    )
    onehot = np.zeros((1, num_classes))
    onehot[0, label] = 1.0
    picked = T.sum_all(T.mul(logits, T.constant(DenseMatrix.from_array(onehot))))
    return T.sub(lse, picked)


@dataclass(frozen=True)
class ParamSnapshot:
    """Frozen copy of trained parameters plus training-set statistics."""

    cfg: GnnConfig
    arrays: dict[str, np.ndarray]
    train_stats: "TrainStats | None" = None
    best_epoch: int | None = None
    val_accuracy: float | None = None

    def __post_init__(self):
        frozen = {}
        for k, v in self.arrays.items():
            a = np.array(v, dtype=np.float64)
            a.flags.writeable = False
            frozen[k] = a
        object.__setattr__(self, "arrays", frozen)

    def params_copy(self) -> ModelParams:
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})


CHECKPOINT_FORMAT = "gt3lab-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(snapshot: ParamSnapshot, path: str) -> None:
    """Write a snapshot as a versioned JSON container with exact floats."""
    stats = None
    if snapshot.train_stats is not None:
        ts = snapshot.train_stats
        stats = {"mu": ts.mu.tolist(), "sigma": ts.sigma.tolist(), "n": ts.n}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(snapshot.cfg),
        "params": {
            k: {"rows": v.shape[0], "cols": v.shape[1], "values": v.flatten().tolist()}
            for k, v in sorted(snapshot.arrays.items())
        },
        "train_stats": stats,
        "best_epoch": snapshot.best_epoch,
        "val_accuracy": snapshot.val_accuracy,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path: str) -> ParamSnapshot:
    from .ssl import TrainStats

    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {payload.get('version')!r}"
        )
    try:
        cfg = GnnConfig(**payload["config"])
        arrays = {
            k: np.array(spec["values"]).reshape(spec["rows"], spec["cols"])
            for k, spec in payload["params"].items()
        }
        stats = None
        if payload.get("train_stats") is not None:
            ts = payload["train_stats"]
            stats = TrainStats(
                mu=DenseMatrix.from_array(ts["mu"]),
                sigma=DenseMatrix.from_array(ts["sigma"]),
                n=int(ts["n"]),
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from None
    return ParamSnapshot(
        cfg=cfg,
        arrays=arrays,
        train_stats=stats,
        best_epoch=payload.get("best_epoch"),
        val_accuracy=payload.get("val_accuracy"),
    )
