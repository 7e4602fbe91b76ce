"""Joint training, per-sample test-time adaptation, and evaluation.

Training minimizes the mean of L_m + gamma * L_s over the training
graphs and snapshots the epoch with the best validation accuracy. At
test time each sample is handled independently: starting from the
snapshot, only the shared-extractor and self-supervised parameters are
updated by minimizing L_s plus a constraint pulling the embedding
mean/covariance of the sample (and a few adaptive views of it) toward
the training-set statistics. The main branch is never touched, and
prediction runs the adapted extractor under the trained main head.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .analysis import roc_auc_binary
from .augment import NoEdgesError, ViewSpec, adaptive_view
from .graphdata import Dataset, Graph
from .models import (
    GnnConfig,
    ModelParams,
    ParamSnapshot,
    classify,
    collect_grads,
    extractor_embedding,
    init_params,
    main_loss,
    make_leaves,
)
from .ssl import (
    InsufficientSamplesError,
    SslSeeds,
    SslWeights,
    TrainStats,
    constraint_node,
    embedding_stats,
    ssl_loss,
)
from . import tensor as T
from .tensor import DenseMatrix, NonFiniteError

MODES = (
    "RAW",
    "JOINT",
    "GT3",
    "GT3-w/o-constraint",
    "GT3-w/o-global",
    "GT3-w/o-local",
)

_MASK = (1 << 64) - 1


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message names epoch and batch."""


def derive_seed(*parts: int) -> int:
    """Deterministic, platform-independent mix of integer parts."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = (h ^ ((int(p) & _MASK) * 0xBF58476D1CE4E5B9 & _MASK)) & _MASK
        h = (h * 0x94D049BB133111EB) & _MASK
        h ^= h >> 29
    return h & 0x7FFFFFFF


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 16
    optimizer: str = "adam"
    gamma: float = 0.5
    seed: int = 0
    constraint_in_training: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class TttConfig:
    steps: int = 10
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    num_stat_views: int = 4
    seed: int = 0
    restore_per_sample: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.num_stat_views < 1:
            raise ValueError(f"num_stat_views must be >= 1, got {self.num_stat_views}")


class Sgd:
    def __init__(self, lr: float) -> None:
        self.lr = lr

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            arrays[name] -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            arrays[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return Sgd(lr)
    raise ValueError(f"optimizer must be adam or sgd, got {name!r}")


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start : start + size]


def _predict(graph: Graph, params: ModelParams) -> tuple[int, np.ndarray]:
    leaves = make_leaves(params)
    logits = classify(graph, leaves, params.cfg)
    z = logits.value.array[0]
    shifted = np.exp(z - z.max())
    scores = shifted / shifted.sum()
    return int(np.argmax(z)), scores


def _accuracy(graphs: list[Graph], params: ModelParams) -> float:
    if not graphs:
        return 0.0
    hits = sum(1 for g in graphs if _predict(g, params)[0] == g.label)
    return hits / len(graphs)


def compute_train_stats(graphs: list[Graph], params: ModelParams) -> TrainStats:
    """Mean/covariance of extractor readouts over a graph collection."""
    embs = []
    for g in graphs:
        leaves = make_leaves(params)
        embs.append(extractor_embedding(g, leaves, params.cfg).value)
    return embedding_stats(embs)


def _task_weights(weights: SslWeights, task: str) -> SslWeights:
    if task == "global":
        return replace(weights, use_global=True, use_local=False)
    if task == "local":
        return replace(weights, use_global=False, use_local=True)
    return weights


def train_task(
    train_graphs: list[Graph],
    cfg: GnnConfig,
    tcfg: TrainConfig,
    weights: SslWeights | None = None,
    val_graphs: list[Graph] | None = None,
    view_spec: ViewSpec | None = None,
    task: str = "joint",
) -> ParamSnapshot:
    """Gradient training of one model for a chosen objective.

    task selects the per-graph loss: "joint" is L_m + gamma * L_s (gamma
    0 reduces it to the supervised loss alone), "main" is supervised
    only, and "ssl" / "global" / "local" train purely self-supervised
    variants. Supervised tasks snapshot the best-validation-accuracy
    epoch; unsupervised tasks keep the final epoch. Raises
    DivergenceError on a non-finite loss.
    """
    if task not in ("joint", "main", "ssl", "global", "local"):
        raise ValueError(f"unknown task {task!r}")
    if not train_graphs:
        raise ValueError("train_task needs at least one training graph")
    weights = _task_weights(weights or SslWeights(), task)
    supervised = task in ("joint", "main")
    use_ssl = task in ("ssl", "global", "local") or (
        task == "joint" and tcfg.gamma > 0.0
    )

    params = init_params(cfg, tcfg.seed)
    opt = make_optimizer(tcfg.optimizer, tcfg.learning_rate)
    shuffle_rng = np.random.default_rng(derive_seed(tcfg.seed, 1))
    dropout_rng = np.random.default_rng(derive_seed(tcfg.seed, 2))

    best_arrays = None
    best_acc = -1.0
    best_epoch = None
    epoch_stats: TrainStats | None = None

    for epoch in range(tcfg.epochs):
        if tcfg.constraint_in_training and weights.lambda_c > 0.0:
            epoch_stats = compute_train_stats(train_graphs, params)
        order = shuffle_rng.permutation(len(train_graphs))
        for batch_no, batch in enumerate(_batches(order, tcfg.batch_size)):
            try:
                leaves = make_leaves(params)
                pieces = []
                ssl_terms_scale = tcfg.gamma if task == "joint" else 1.0
                for idx in batch:
                    g = train_graphs[idx]
                    if supervised:
                        logits = classify(g, leaves, cfg, training=True,
                                          rng=dropout_rng)
                        pieces.append(main_loss(logits, g.label, cfg.num_classes))
                    if use_ssl:
                        seeds = SslSeeds(
                            shuffle=derive_seed(tcfg.seed, 3, epoch, int(idx)),
                            view_a=derive_seed(tcfg.seed, 4, epoch, int(idx)),
                            view_b=derive_seed(tcfg.seed, 5, epoch, int(idx)),
                        )
                        s_node, _ = ssl_loss(g, leaves, cfg, weights, seeds, view_spec)
                        pieces.append(T.scale(s_node, ssl_terms_scale))
                total = pieces[0]
                for piece in pieces[1:]:
                    total = T.add(total, piece)
                total = T.scale(total, 1.0 / len(batch))
                if (
                    tcfg.constraint_in_training
                    and weights.lambda_c > 0.0
                    and epoch_stats is not None
                    and len(batch) >= 2
                ):
                    embs = [
                        extractor_embedding(train_graphs[idx], leaves, cfg)
                        for idx in batch
                    ]
                    total = T.add(
                        total,
                        T.scale(constraint_node(epoch_stats, embs), weights.lambda_c),
                    )
                loss_value = total.value.item()
                if not np.isfinite(loss_value):
                    raise NonFiniteError("loss is not finite")
                T.backward(total)
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"epoch {epoch} batch {batch_no}: {exc}"
                ) from None
            opt.step(params.arrays, collect_grads(leaves))

        if supervised and val_graphs:
            acc = _accuracy(val_graphs, params)
            if acc > best_acc:
                best_acc = acc
                best_epoch = epoch
                best_arrays = {k: v.copy() for k, v in params.arrays.items()}

    if best_arrays is None:
        best_arrays = {k: v.copy() for k, v in params.arrays.items()}
        best_epoch = tcfg.epochs - 1
        best_acc = float("nan")

    best_params = ModelParams(cfg, best_arrays)
    stats = None
    if len(train_graphs) >= 2:
        stats = compute_train_stats(train_graphs, best_params)
    return ParamSnapshot(
        cfg=cfg,
        arrays=best_params.arrays,
        train_stats=stats,
        best_epoch=best_epoch,
        val_accuracy=best_acc if best_acc >= 0 else None,
    )


def train_joint(
    train_graphs: list[Graph],
    cfg: GnnConfig,
    tcfg: TrainConfig,
    weights: SslWeights | None = None,
    val_graphs: list[Graph] | None = None,
    view_spec: ViewSpec | None = None,
) -> ParamSnapshot:
    """Joint supervised + self-supervised training (task "joint")."""
    return train_task(train_graphs, cfg, tcfg, weights, val_graphs, view_spec, "joint")


@dataclass(frozen=True)
class TttResult:
    params: ModelParams
    steps_used: int
    fell_back: bool
    pre_loss: float
    post_loss: float


def ttt_adapt(
    graph: Graph,
    snapshot: ParamSnapshot,
    ttt_cfg: TttConfig,
    weights: SslWeights,
    view_spec: ViewSpec | None = None,
    sample_key: int = 0,
    start_params: ModelParams | None = None,
) -> TttResult:
    """Adapt the extractor and ssl parameters to one test graph.

    Minimizes L_s(graph) + lambda_c * constraint for ttt_cfg.steps steps,
    where the constraint compares training statistics against the
    mean/covariance of the graph's extractor readout together with
    num_stat_views adaptive views of it. Main-branch parameters are
    excluded from the update. A non-finite loss at any step falls back to
    the unadapted snapshot for this sample. Deterministic for a given
    (snapshot, sample_key, config) regardless of evaluation order.
    """
    cfg = snapshot.cfg
    params = start_params if start_params is not None else snapshot.params_copy()
    if ttt_cfg.steps == 0:
        return TttResult(params, 0, False, 0.0, 0.0)

    base_view = view_spec or ViewSpec()
    seeds = SslSeeds(
        shuffle=derive_seed(ttt_cfg.seed, sample_key, 1),
        view_a=derive_seed(ttt_cfg.seed, sample_key, 2),
        view_b=derive_seed(ttt_cfg.seed, sample_key, 3),
    )

    use_constraint = weights.lambda_c > 0.0 and snapshot.train_stats is not None
    stat_views: list[Graph] = [graph]
    if use_constraint:
        for i in range(ttt_cfg.num_stat_views):
            try:
                stat_views.append(
                    adaptive_view(
                        graph,
                        replace(
                            base_view,
                            kind="adaptive",
                            seed=derive_seed(ttt_cfg.seed, sample_key, 100 + i),
                        ),
                    )
                )
            except NoEdgesError:
                stat_views.append(graph)

    opt = make_optimizer(ttt_cfg.optimizer, ttt_cfg.learning_rate)
    pre_loss = float("nan")
    post_loss = float("nan")
    for step in range(ttt_cfg.steps):
        try:
            leaves = make_leaves(params)
            total, _ = ssl_loss(graph, leaves, cfg, weights, seeds, base_view)
            if use_constraint:
                embs = [extractor_embedding(v, leaves, cfg) for v in stat_views]
                total = T.add(
                    total,
                    T.scale(constraint_node(snapshot.train_stats, embs),
                            weights.lambda_c),
                )
            loss_value = total.value.item()
            if not np.isfinite(loss_value):
                raise NonFiniteError("adaptation loss is not finite")
            if step == 0:
                pre_loss = loss_value
            post_loss = loss_value
            T.backward(total)
        except (NonFiniteError, InsufficientSamplesError):
            return TttResult(snapshot.params_copy(), step, True, pre_loss, post_loss)
        grads = {
            name: g
            for name, g in collect_grads(leaves).items()
            if not name.startswith("m.")
        }
        opt.step(params.arrays, grads)
    return TttResult(params, ttt_cfg.steps, False, pre_loss, post_loss)


def adaptation_objective(
    graph: Graph,
    params: ModelParams,
    snapshot: ParamSnapshot,
    ttt_cfg: TttConfig,
    weights: SslWeights,
    view_spec: ViewSpec | None = None,
    sample_key: int = 0,
) -> float:
    """The L_s + lambda_c * constraint value a TTT run sees for `params`,
    using the same derived seeds as ttt_adapt."""
    cfg = snapshot.cfg
    base_view = view_spec or ViewSpec()
    seeds = SslSeeds(
        shuffle=derive_seed(ttt_cfg.seed, sample_key, 1),
        view_a=derive_seed(ttt_cfg.seed, sample_key, 2),
        view_b=derive_seed(ttt_cfg.seed, sample_key, 3),
    )
    leaves = make_leaves(params)
    total, _ = ssl_loss(graph, leaves, cfg, weights, seeds, base_view)
    if weights.lambda_c > 0.0 and snapshot.train_stats is not None:
        stat_views: list[Graph] = [graph]
        for i in range(ttt_cfg.num_stat_views):
            try:
                stat_views.append(
                    adaptive_view(
                        graph,
                        replace(
                            base_view,
                            kind="adaptive",
                            seed=derive_seed(ttt_cfg.seed, sample_key, 100 + i),
                        ),
                    )
                )
            except NoEdgesError:
                stat_views.append(graph)
        embs = [extractor_embedding(v, leaves, cfg) for v in stat_views]
        total = T.add(
            total,
            T.scale(constraint_node(snapshot.train_stats, embs), weights.lambda_c),
        )
    return total.value.item()


@dataclass(frozen=True)
class EvalRecord:
    index: int
    label: int
    pred: int
    scores: tuple[float, ...]
    ttt_steps_used: int
    fell_back: bool


@dataclass(frozen=True)
class EvalReport:
    mode: str
    records: tuple[EvalRecord, ...]
    accuracy: float
    auc: float | None

    @property
    def num_samples(self) -> int:
        return len(self.records)

    def to_csv(self, path: str) -> None:
        num_scores = len(self.records[0].scores) if self.records else 0
        header = (
            ["sample_index", "true_label", "predicted_label"]
            + [f"score_{c}" for c in range(num_scores)]
            + ["ttt_steps_used"]
        )
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for r in self.records:
                writer.writerow(
                    [r.index, r.label, r.pred]
                    + [repr(s) for s in r.scores]
                    + [r.ttt_steps_used]
                )

    def summary_dict(self, config_hash: str | None = None) -> dict:
        d = {
            "mode": self.mode,
            "num_samples": self.num_samples,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "fallback_samples": [r.index for r in self.records if r.fell_back],
        }
        if config_hash is not None:
            d["config_hash"] = config_hash
        return d

    def to_json_summary(self, path: str, config_hash: str | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary_dict(config_hash), fh, indent=2, sort_keys=True)
            fh.write("\n")


def resolve_mode(
    mode: str, weights: SslWeights, ttt_cfg: TttConfig
) -> tuple[SslWeights, TttConfig]:
    """Translate an evaluation mode string into effective settings."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode in ("RAW", "JOINT"):
        return weights, replace(ttt_cfg, steps=0)
    if mode == "GT3-w/o-constraint":
        return replace(weights, lambda_c=0.0), ttt_cfg
    if mode == "GT3-w/o-global":
        return replace(weights, use_global=False), ttt_cfg
    if mode == "GT3-w/o-local":
        return replace(weights, use_local=False), ttt_cfg
    return weights, ttt_cfg


def evaluate(
    dataset: Dataset,
    indices: tuple[int, ...],
    snapshot: ParamSnapshot,
    mode: str = "GT3",
    ttt_cfg: TttConfig | None = None,
    weights: SslWeights | None = None,
    view_spec: ViewSpec | None = None,
    jobs: int = 1,
) -> EvalReport:
    """Per-sample evaluation of a snapshot under a mode.

    Samples are independent: each one adapts from the same snapshot with
    seeds keyed by its dataset index, so permuting `indices` or raising
    `jobs` cannot change any prediction. Records are merged in dataset
    order. With restore_per_sample=False adaptation instead carries over
    from sample to sample in the given order (jobs must be 1).
    """
    ttt_cfg = ttt_cfg or TttConfig()
    weights = weights or SslWeights()
    eff_weights, eff_ttt = resolve_mode(mode, weights, ttt_cfg)

    def run_one(idx: int, start: ModelParams | None = None) -> tuple[EvalRecord, ModelParams]:
        g = dataset.graphs[idx]
        result = ttt_adapt(
            g, snapshot, eff_ttt, eff_weights, view_spec,
            sample_key=idx, start_params=start,
        )
        pred, scores = _predict(g, result.params)
        record = EvalRecord(
            index=idx,
            label=g.label,
            pred=pred,
            scores=tuple(float(s) for s in scores),
            ttt_steps_used=result.steps_used,
            fell_back=result.fell_back,
        )
        return record, result.params

    if not eff_ttt.restore_per_sample:
        if jobs != 1:
            raise ValueError("carry-over adaptation requires jobs=1")
        records = []
        carried: ModelParams | None = snapshot.params_copy()
        for idx in indices:
            record, carried = run_one(idx, carried)
            records.append(record)
    elif jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(lambda i: run_one(i)[0], indices))
    else:
        records = [run_one(idx)[0] for idx in indices]

    records = tuple(sorted(records, key=lambda r: r.index))
    hits = sum(1 for r in records if r.pred == r.label)
    accuracy = hits / len(records) if records else 0.0

    auc = None
    if snapshot.cfg.num_classes == 2 and records:
        labels = np.array([r.label for r in records])
        if len(set(labels.tolist())) == 2:
            scores = np.array([r.scores[1] for r in records])
            auc = roc_auc_binary(scores, labels)

    return EvalReport(mode=mode, records=records, accuracy=accuracy, auc=auc)
