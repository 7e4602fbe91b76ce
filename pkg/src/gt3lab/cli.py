"""Command-line entry points and experiment configuration.

Subcommands: ingest (parse and summarize a dataset), split (write a
train/val/test index file), train (fit a model and save a checkpoint),
eval (per-sample evaluation of a checkpoint under a mode), cka (compare
layer representations across training objectives), verify (numerical
theorem checks). Configuration comes from a TOML file; individual values
can be overridden with repeated --set section.key=value flags. Exit
codes: 0 on success, 2 on input or configuration errors, 3 when a
verification run finds violations.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from .analysis import layerwise_cka
from .augment import ViewSpec
from .graphdata import (
    Dataset,
    Graph,
    ParseError,
    SplitError,
    SplitSpec,
    ood_split,
    parse_tudataset,
    random_split,
)
from .models import (
    CheckpointError,
    ConfigError,
    GnnConfig,
    load_checkpoint,
    save_checkpoint,
)
from .ssl import SslWeights
from .tensor import DenseMatrix
from .theory import theorem1_sweep, theorem2_check
from .ttt import MODES, TrainConfig, TttConfig, evaluate, train_joint, train_task


@dataclass(frozen=True)
class SynthSpec:
    """Two-class synthetic graph family with a size spread.

    Class 0 graphs are cycles with random chords, class 1 graphs are
    stars with random rim edges; attributes carry a constant column, a
    normalized degree column, and a noise column. Node counts span
    [size_low, size_high] in both classes so a median-size split yields
    a genuine small-to-large shift.
    """

    num_graphs: int = 120
    size_low: int = 6
    size_high: int = 30
    noise_edge_prob: float = 0.05
    attr_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_graphs < 10:
            raise ConfigError(f"num_graphs must be >= 10, got {self.num_graphs}")
        if not 4 <= self.size_low <= self.size_high:
            raise ConfigError(
                f"need 4 <= size_low <= size_high, got "
                f"[{self.size_low}, {self.size_high}]"
            )
        if not 0.0 <= self.noise_edge_prob <= 1.0:
            raise ConfigError("noise_edge_prob must be in [0, 1]")
        if self.attr_noise < 0.0:
            raise ConfigError("attr_noise must be >= 0")


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Deterministic synthetic dataset; labels alternate so both classes
    are balanced within one graph."""
    rng = np.random.default_rng(spec.seed)
    graphs = []
    for i in range(spec.num_graphs):
        label = i % 2
        n = int(rng.integers(spec.size_low, spec.size_high + 1))
        edges = set()
        if label == 0:
            for j in range(n):
                u, v = j, (j + 1) % n
                edges.add((min(u, v), max(u, v)))
        else:
            for j in range(1, n):
                edges.add((0, j))
        for u in range(n - 1):
            for v in range(u + 1, n):
                if (u, v) not in edges and rng.random() < spec.noise_edge_prob:
                    edges.add((u, v))
        edge_tuple = tuple(sorted(edges))
        deg = np.zeros(n)
        for u, v in edge_tuple:
            deg[u] += 1
            deg[v] += 1
        attrs = np.column_stack(
            [
                np.ones(n),
                deg / max(n - 1, 1),
                rng.normal(0.0, spec.attr_noise, size=n),
            ]
        )
        graphs.append(
            Graph(
                num_nodes=n,
                edges=edge_tuple,
                attributes=DenseMatrix.from_array(attrs),
                label=label,
            )
        )
    return Dataset(name="synthetic", graphs=tuple(graphs), num_classes=2)


_DEFAULT_CONFIG: dict = {
    "dataset": {
        "kind": "synthetic",
        "directory": "",
        "name": "",
        "num_graphs": 120,
        "size_low": 6,
        "size_high": 30,
        "noise_edge_prob": 0.05,
        "attr_noise": 0.1,
        "seed": 0,
    },
    "model": {
        "arch": "gcn",
        "num_layers": 2,
        "hidden_dim": 16,
        "shared_layers": 1,
        "readout": "",
        "dropout_rate": 0.0,
        "layer_norm": False,
    },
    "train": {
        "epochs": 50,
        "learning_rate": 1e-3,
        "batch_size": 16,
        "optimizer": "adam",
        "gamma": 0.5,
        "seed": 0,
        "constraint_in_training": False,
    },
    "ssl": {
        "alpha": 1.0,
        "beta_decor": 1e-3,
        "tau": 0.5,
        "lambda_c": 1.0,
    },
    "ttt": {
        "steps": 10,
        "learning_rate": 1e-4,
        "optimizer": "adam",
        "num_stat_views": 4,
        "seed": 0,
    },
    "views": {
        "p_edge_base": 0.2,
        "p_attr_base": 0.2,
        "p_cut": 0.5,
    },
    "split": {
        "kind": "ood",
        "seed": 0,
    },
    "run": {
        "jobs": 1,
    },
}


def _merge_config(raw: dict) -> dict:
    merged = {sec: dict(vals) for sec, vals in _DEFAULT_CONFIG.items()}
    for section, values in raw.items():
        if section not in merged:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"config section [{section}] must be a table")
        for key, val in values.items():
            if key not in merged[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            merged[section][key] = val
    return merged


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    """Merged config dict from an optional TOML file plus overrides.

    Overrides use the dotted form section.key=value, with the value
    parsed as a TOML literal (so strings need quotes)."""
    raw: dict = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
    merged = _merge_config(raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, text = item.split("=", 1)
        if dotted.count(".") != 1:
            raise ConfigError(f"override key must be section.key: {dotted!r}")
        section, key = dotted.split(".")
        if section not in merged or key not in merged[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        try:
            value = tomllib.loads(f"v = {text}")["v"]
        except tomllib.TOMLDecodeError:
            raise ConfigError(f"cannot parse override value {text!r}") from None
        merged[section][key] = value
    return merged


def config_hash(merged: dict) -> str:
    blob = json.dumps(merged, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def build_dataset(merged: dict) -> Dataset:
    ds_cfg = merged["dataset"]
    if ds_cfg["kind"] == "synthetic":
        return generate_synthetic(
            SynthSpec(
                num_graphs=int(ds_cfg["num_graphs"]),
                size_low=int(ds_cfg["size_low"]),
                size_high=int(ds_cfg["size_high"]),
                noise_edge_prob=float(ds_cfg["noise_edge_prob"]),
                attr_noise=float(ds_cfg["attr_noise"]),
                seed=int(ds_cfg["seed"]),
            )
        )
    if ds_cfg["kind"] == "tudataset":
        if not ds_cfg["directory"] or not ds_cfg["name"]:
            raise ConfigError("dataset.directory and dataset.name are required")
        return parse_tudataset(ds_cfg["directory"], ds_cfg["name"])
    raise ConfigError(f"dataset.kind must be synthetic or tudataset, got "
                      f"{ds_cfg['kind']!r}")


def build_split(merged: dict, dataset: Dataset) -> SplitSpec:
    kind = merged["split"]["kind"]
    seed = int(merged["split"]["seed"])
    if kind == "ood":
        return ood_split(dataset, seed)
    if kind == "random":
        return random_split(dataset, seed)
    raise ConfigError(f"split.kind must be ood or random, got {kind!r}")


def build_model_config(merged: dict, dataset: Dataset) -> GnnConfig:
    m = merged["model"]
    return GnnConfig(
        arch=m["arch"],
        num_layers=int(m["num_layers"]),
        hidden_dim=int(m["hidden_dim"]),
        shared_layers=int(m["shared_layers"]),
        readout=m["readout"] or None,
        dropout_rate=float(m["dropout_rate"]),
        layer_norm=bool(m["layer_norm"]),
        num_classes=dataset.num_classes,
        attr_dim=dataset.attr_dim,
    )


def build_train_config(merged: dict) -> TrainConfig:
    t = merged["train"]
    return TrainConfig(
        epochs=int(t["epochs"]),
        learning_rate=float(t["learning_rate"]),
        batch_size=int(t["batch_size"]),
        optimizer=t["optimizer"],
        gamma=float(t["gamma"]),
        seed=int(t["seed"]),
        constraint_in_training=bool(t["constraint_in_training"]),
    )


def build_ssl_weights(merged: dict) -> SslWeights:
    s = merged["ssl"]
    return SslWeights(
        gamma=float(merged["train"]["gamma"]),
        alpha=float(s["alpha"]),
        beta_decor=float(s["beta_decor"]),
        tau=float(s["tau"]),
        lambda_c=float(s["lambda_c"]),
    )


def build_ttt_config(merged: dict) -> TttConfig:
    t = merged["ttt"]
    return TttConfig(
        steps=int(t["steps"]),
        learning_rate=float(t["learning_rate"]),
        optimizer=t["optimizer"],
        num_stat_views=int(t["num_stat_views"]),
        seed=int(t["seed"]),
    )


def build_view_spec(merged: dict) -> ViewSpec:
    v = merged["views"]
    return ViewSpec(
        kind="adaptive",
        p_edge_base=float(v["p_edge_base"]),
        p_attr_base=float(v["p_attr_base"]),
        p_cut=float(v["p_cut"]),
    )


def _load_split_file(path: str, dataset: Dataset) -> SplitSpec:
    with open(path, "r", encoding="utf-8") as fh:
        split = SplitSpec.from_json_dict(json.load(fh))
    n = len(dataset.graphs)
    for idx in split.train + split.val + split.test:
        if not 0 <= idx < n:
            raise SplitError(f"{path}: index {idx} outside dataset of {n} graphs")
    return split


def _graphs(dataset: Dataset, indices) -> list[Graph]:
    return [dataset.graphs[i] for i in indices]


def cmd_ingest(args) -> int:
    dataset = parse_tudataset(args.dir, args.name)
    print(f"{len(dataset.graphs)} graphs, {dataset.num_classes} classes, "
          f"F={dataset.attr_dim}")
    for w in dataset.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.out and not args.validate_only:
        sizes = [g.num_nodes for g in dataset.graphs]
        summary = {
            "name": dataset.name,
            "num_graphs": len(dataset.graphs),
            "num_classes": dataset.num_classes,
            "attr_dim": dataset.attr_dim,
            "min_nodes": min(sizes),
            "max_nodes": max(sizes),
            "warnings": list(dataset.warnings),
        }
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_split(args) -> int:
    merged = load_config(args.config, args.set)
    if args.kind:
        merged["split"]["kind"] = args.kind
    if args.seed is not None:
        merged["split"]["seed"] = args.seed
    dataset = build_dataset(merged)
    split = build_split(merged, dataset)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(split.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for w in split.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{split.kind} split: {len(split.train)} train / {len(split.val)} val / "
          f"{len(split.test)} test")
    return 0


def cmd_train(args) -> int:
    merged = load_config(args.config, args.set)
    if args.raw:
        merged["train"]["gamma"] = 0.0
    dataset = build_dataset(merged)
    split = (
        _load_split_file(args.split_file, dataset)
        if args.split_file
        else build_split(merged, dataset)
    )
    cfg = build_model_config(merged, dataset)
    tcfg = build_train_config(merged)
    weights = build_ssl_weights(merged)
    views = build_view_spec(merged)
    snapshot = train_joint(
        _graphs(dataset, split.train), cfg, tcfg, weights,
        val_graphs=_graphs(dataset, split.val), view_spec=views,
    )
    save_checkpoint(snapshot, args.out)
    val_acc = "n/a" if snapshot.val_accuracy is None else f"{snapshot.val_accuracy:.4f}"
    print(f"trained {cfg.arch} for {tcfg.epochs} epochs "
          f"(gamma={tcfg.gamma}), best epoch {snapshot.best_epoch}, "
          f"val accuracy {val_acc}")
    return 0


def cmd_eval(args) -> int:
    merged = load_config(args.config, args.set)
    dataset = build_dataset(merged)
    split = (
        _load_split_file(args.split_file, dataset)
        if args.split_file
        else build_split(merged, dataset)
    )
    snapshot = load_checkpoint(args.checkpoint)
    indices = {"train": split.train, "val": split.val, "test": split.test}[args.on]
    report = evaluate(
        dataset,
        indices,
        snapshot,
        mode=args.mode,
        ttt_cfg=build_ttt_config(merged),
        weights=build_ssl_weights(merged),
        view_spec=build_view_spec(merged),
        jobs=int(merged["run"]["jobs"]),
    )
    os.makedirs(args.out, exist_ok=True)
    report.to_csv(os.path.join(args.out, "predictions.csv"))
    report.to_json_summary(
        os.path.join(args.out, "summary.json"), config_hash=config_hash(merged)
    )
    auc_text = "n/a" if report.auc is None else f"{report.auc:.4f}"
    print(f"mode {report.mode}: accuracy {report.accuracy:.4f}, "
          f"auc {auc_text}, {report.num_samples} samples")
    return 0


def cmd_cka(args) -> int:
    merged = load_config(args.config, args.set)
    dataset = build_dataset(merged)
    split = (
        _load_split_file(args.split_file, dataset)
        if args.split_file
        else build_split(merged, dataset)
    )
    base_cfg = build_model_config(merged, dataset)
    # All layers shared so each objective trains the same stack shape.
    cfg = GnnConfig(
        arch=base_cfg.arch,
        num_layers=base_cfg.num_layers,
        hidden_dim=base_cfg.hidden_dim,
        shared_layers=base_cfg.num_layers,
        readout=base_cfg.readout,
        dropout_rate=base_cfg.dropout_rate,
        layer_norm=base_cfg.layer_norm,
        num_classes=base_cfg.num_classes,
        attr_dim=base_cfg.attr_dim,
    )
    tcfg = build_train_config(merged)
    weights = build_ssl_weights(merged)
    views = build_view_spec(merged)
    train_graphs = _graphs(dataset, split.train)
    val_graphs = _graphs(dataset, split.val)
    tasks = [("M", "main"), ("C", "ssl"), ("G", "global"), ("L", "local")]
    tagged = []
    for tag, task in tasks:
        snap = train_task(
            train_graphs, cfg, tcfg, weights,
            val_graphs=val_graphs, view_spec=views, task=task,
        )
        tagged.append((tag, snap))
    probe = val_graphs[:64] if val_graphs else train_graphs[:64]
    report = layerwise_cka(tagged, probe)
    report.to_csv(args.out)
    print(f"wrote {len(report.rows)} CKA values "
          f"({len(tasks)} models, {cfg.num_layers} layers) to {args.out}")
    return 0


def cmd_verify(args) -> int:
    if args.theorem == 1:
        report = theorem1_sweep(
            trials_per_c=args.trials if args.trials else 1000, seed=args.seed
        )
    else:
        report = theorem2_check(
            trials=args.trials if args.trials else 500,
            epsilon=args.epsilon,
            seed=args.seed,
            aux_kind=args.aux,
        )
    if args.out:
        report.to_json(args.out)
    status = "passed" if report.passed else "FAILED"
    print(f"{report.theorem}: {status}, {report.checked} checked, "
          f"{report.skipped} skipped, {report.violations} violations "
          f"({report.elapsed_seconds:.2f}s)")
    return 0 if report.passed else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gt3lab",
        description="Graph test-time-training laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a TUDataset directory and summarize it")
    p.add_argument("--dir", required=True, help="dataset directory")
    p.add_argument("--name", required=True, help="dataset name prefix")
    p.add_argument("--out", help="optional JSON summary path")
    p.add_argument("--validate-only", action="store_true",
                   help="parse and report without writing anything")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="compute a train/val/test split")
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--kind", choices=["ood", "random"], help="override split kind")
    p.add_argument("--seed", type=int, help="override split seed")
    p.add_argument("--out", required=True, help="split JSON output path")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override a config value")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--split-file", help="use a previously written split JSON")
    p.add_argument("--raw", action="store_true",
                   help="supervised-only baseline (gamma = 0)")
    p.add_argument("--out", required=True, help="checkpoint JSON output path")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override a config value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a mode")
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--split-file", help="use a previously written split JSON")
    p.add_argument("--checkpoint", required=True, help="checkpoint JSON path")
    p.add_argument("--mode", default="GT3", choices=list(MODES))
    p.add_argument("--on", default="test", choices=["train", "val", "test"],
                   help="which split part to evaluate")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override a config value")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cka", help="layerwise CKA across training objectives")
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--split-file", help="use a previously written split JSON")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override a config value")
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("verify", help="run a numerical theorem check")
    p.add_argument("--theorem", type=int, required=True, choices=[1, 2])
    p.add_argument("--trials", type=int, help="trial count (default 1000/C or 500)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=0.01,
                   help="inner-product threshold for theorem 2")
    p.add_argument("--aux", default="quadratic", choices=["quadratic", "contrastive"],
                   help="auxiliary loss family for theorem 2")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        ParseError,
        SplitError,
        ConfigError,
        CheckpointError,
        FileNotFoundError,
        NotADirectoryError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
