"""Graph containers, TUDataset text-format I/O, and dataset splits.

The on-disk format is the usual multi-file layout: name_A.txt lists each
undirected edge in both directions as 1-based "i, j" pairs over global
node ids, name_graph_indicator.txt maps each global node to a 1-based
graph id, name_graph_labels.txt holds one integer label per graph, and
optional name_node_attributes.txt / name_node_labels.txt carry per-node
real vectors and categorical labels.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .tensor import DenseMatrix


class ParseError(ValueError):
    """Malformed dataset file; message names the file and line."""


class SplitError(ValueError):
    """A split cannot satisfy its size or grouping requirements."""


@dataclass(frozen=True)
class Graph:
    """Undirected attributed graph with an optional class label.

    edges holds each undirected edge once as (u, v) with u < v in local
    0-based node ids; attributes is num_nodes x attr_dim.
    """

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    attributes: DenseMatrix
    label: int | None = None

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError("graph must have at least one node")
        seen = set()
        for u, v in self.edges:
            if not (0 <= u < v < self.num_nodes):
                raise ValueError(f"edge ({u}, {v}) invalid for {self.num_nodes} nodes")
            if (u, v) in seen:
                raise ValueError(f"duplicate edge ({u}, {v})")
            seen.add((u, v))
        if self.attributes.rows != self.num_nodes:
            raise ValueError(
                f"attribute rows {self.attributes.rows} != num_nodes {self.num_nodes}"
            )

    @property
    def attr_dim(self) -> int:
        return self.attributes.cols

    def degrees(self) -> np.ndarray:
        """Node degrees without self-loops."""
        deg = np.zeros(self.num_nodes)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg


@dataclass(frozen=True)
class Dataset:
    name: str
    graphs: tuple[Graph, ...]
    num_classes: int
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.graphs:
            raise ValueError("dataset must contain at least one graph")
        dims = {g.attr_dim for g in self.graphs}
        if len(dims) != 1:
            raise ValueError(f"inconsistent attribute dims {sorted(dims)}")
        present = set()
        for g in self.graphs:
            if g.label is not None:
                if not 0 <= g.label < self.num_classes:
                    raise ValueError(f"label {g.label} outside [0, {self.num_classes})")
                present.add(g.label)
        missing = [c for c in range(self.num_classes) if c not in present]
        if missing:
            object.__setattr__(
                self,
                "warnings",
                self.warnings + (f"classes {missing} have no graphs",),
            )

    @property
    def attr_dim(self) -> int:
        return self.graphs[0].attr_dim


@dataclass(frozen=True)
class SplitSpec:
    """Index triple over a dataset's graph list."""

    kind: str
    seed: int
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    warnings: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SplitSpec":
        return cls(
            kind=d["kind"],
            seed=int(d["seed"]),
            train=tuple(int(i) for i in d["train"]),
            val=tuple(int(i) for i in d["val"]),
            test=tuple(int(i) for i in d["test"]),
            warnings=tuple(d.get("warnings", ())),
        )


def _read_lines(path: str, side: str) -> list[str]:
    if not os.path.isfile(path):
        raise ParseError(f"{side} file missing: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    return lines


def _parse_int(text: str, path: str, lineno: int) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ParseError(f"{path}:{lineno}: expected an integer, got {text!r}") from None


def _parse_float(text: str, path: str, lineno: int) -> float:
    try:
        x = float(text.strip())
    except ValueError:
        raise ParseError(f"{path}:{lineno}: expected a number, got {text!r}") from None
    if not math.isfinite(x):
        raise ParseError(f"{path}:{lineno}: non-finite value {text!r}")
    return x


def parse_tudataset(directory: str, name: str) -> Dataset:
    """Parse the multi-file text format into a Dataset.

    Undirected edges listed in both directions are collapsed, self-loops
    are dropped, graph labels are remapped to contiguous 0-based indices
    preserving sorted order, and node_labels (if present) are appended to
    the attribute matrix as one-hot columns after any real attributes.
    Graphs with neither attribute file get a constant-1 column.
    """
    path_a = os.path.join(directory, f"{name}_A.txt")
    path_ind = os.path.join(directory, f"{name}_graph_indicator.txt")
    path_lab = os.path.join(directory, f"{name}_graph_labels.txt")
    path_attr = os.path.join(directory, f"{name}_node_attributes.txt")
    path_nlab = os.path.join(directory, f"{name}_node_labels.txt")

    ind_lines = _read_lines(path_ind, "graph_indicator")
    node_graph = [
        _parse_int(line, path_ind, i + 1) for i, line in enumerate(ind_lines)
    ]
    num_nodes_total = len(node_graph)
    if num_nodes_total == 0:
        raise ParseError(f"{path_ind}:1: no nodes listed")

    graph_ids = sorted(set(node_graph))
    gid_index = {gid: k for k, gid in enumerate(graph_ids)}
    local_index: list[int] = []
    counts = dict.fromkeys(graph_ids, 0)
    for gid in node_graph:
        local_index.append(counts[gid])
        counts[gid] += 1

    lab_lines = _read_lines(path_lab, "graph_labels")
    if len(lab_lines) != len(graph_ids):
        raise ParseError(
            f"{path_lab}:{min(len(lab_lines), len(graph_ids)) + 1}: "
            f"{len(lab_lines)} labels for {len(graph_ids)} graphs"
        )
    raw_labels = [_parse_int(line, path_lab, i + 1) for i, line in enumerate(lab_lines)]
    label_map = {lab: k for k, lab in enumerate(sorted(set(raw_labels)))}
    labels = [label_map[lab] for lab in raw_labels]

    edge_sets: list[set[tuple[int, int]]] = [set() for _ in graph_ids]
    for lineno, line in enumerate(_read_lines(path_a, "edge list"), start=1):
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(f"{path_a}:{lineno}: expected 'i, j', got {line!r}")
        u = _parse_int(parts[0], path_a, lineno)
        v = _parse_int(parts[1], path_a, lineno)
        for endpoint in (u, v):
            if not 1 <= endpoint <= num_nodes_total:
                raise ParseError(
                    f"{path_a}:{lineno}: node {endpoint} not assigned to any graph"
                )
        gu, gv = node_graph[u - 1], node_graph[v - 1]
        if gu != gv:
            raise ParseError(
                f"{path_a}:{lineno}: edge ({u}, {v}) crosses graphs {gu} and {gv}"
            )
        if u == v:
            continue
        lu, lv = local_index[u - 1], local_index[v - 1]
        edge_sets[gid_index[gu]].add((min(lu, lv), max(lu, lv)))

    real_attrs: list[list[float]] | None = None
    if os.path.isfile(path_attr):
        attr_lines = _read_lines(path_attr, "node_attributes")
        if len(attr_lines) != num_nodes_total:
            raise ParseError(
                f"{path_attr}:{min(len(attr_lines), num_nodes_total) + 1}: "
                f"{len(attr_lines)} attribute rows for {num_nodes_total} nodes"
            )
        real_attrs = []
        width = None
        for i, line in enumerate(attr_lines, start=1):
            row = [_parse_float(p, path_attr, i) for p in line.split(",")]
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(
                    f"{path_attr}:{i}: row has {len(row)} values, expected {width}"
                )
            real_attrs.append(row)

    onehot_attrs: list[list[float]] | None = None
    if os.path.isfile(path_nlab):
        nlab_lines = _read_lines(path_nlab, "node_labels")
        if len(nlab_lines) != num_nodes_total:
            raise ParseError(
                f"{path_nlab}:{min(len(nlab_lines), num_nodes_total) + 1}: "
                f"{len(nlab_lines)} node labels for {num_nodes_total} nodes"
            )
        raw = [_parse_int(line, path_nlab, i + 1) for i, line in enumerate(nlab_lines)]
        values = sorted(set(raw))
        pos = {val: k for k, val in enumerate(values)}
        onehot_attrs = []
        for val in raw:
            row = [0.0] * len(values)
            row[pos[val]] = 1.0
            onehot_attrs.append(row)

    node_rows: list[list[float]] = []
    for i in range(num_nodes_total):
        row: list[float] = []
        if real_attrs is not None:
            row.extend(real_attrs[i])
        if onehot_attrs is not None:
            row.extend(onehot_attrs[i])
        if not row:
            row = [1.0]
        node_rows.append(row)

    graphs = []
    for k, gid in enumerate(graph_ids):
        rows = [node_rows[i] for i in range(num_nodes_total) if node_graph[i] == gid]
        attrs = DenseMatrix(len(rows), len(rows[0]), rows)
        graphs.append(
            Graph(
                num_nodes=len(rows),
                edges=tuple(sorted(edge_sets[k])),
                attributes=attrs,
                label=labels[k],
            )
        )
    return Dataset(name=name, graphs=tuple(graphs), num_classes=len(label_map))


def write_tudataset(dataset: Dataset, directory: str, name: str) -> None:
    """Write a Dataset back into the multi-file text format.

    Attributes always go to node_attributes.txt with full-precision reprs,
    so parse_tudataset(write_tudataset(ds)) reproduces ds exactly.
    """
    os.makedirs(directory, exist_ok=True)
    a_lines: list[str] = []
    ind_lines: list[str] = []
    lab_lines: list[str] = []
    attr_lines: list[str] = []
    offset = 0
    for k, g in enumerate(dataset.graphs, start=1):
        for u, v in g.edges:
            a_lines.append(f"{u + 1 + offset}, {v + 1 + offset}")
            a_lines.append(f"{v + 1 + offset}, {u + 1 + offset}")
        ind_lines.extend(str(k) for _ in range(g.num_nodes))
        lab_lines.append(str(g.label if g.label is not None else 0))
        for row in g.attributes.tolist():
            attr_lines.append(", ".join(repr(x) for x in row))
        offset += g.num_nodes

    files = {
        f"{name}_A.txt": a_lines,
        f"{name}_graph_indicator.txt": ind_lines,
        f"{name}_graph_labels.txt": lab_lines,
        f"{name}_node_attributes.txt": attr_lines,
    }
    for fname, lines in files.items():
        with open(os.path.join(directory, fname), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines))
            if lines:
                fh.write("\n")


def normalize_adjacency(graph: Graph, scheme: str = "sym_selfloop") -> DenseMatrix:
    """Dense propagation matrix for a graph.

    sym_selfloop: D^-1/2 (A + I) D^-1/2 with degrees taken after adding
    self-loops. row: D^-1 (A + I). raw_selfloop: A + I unnormalized.
    """
    n = graph.num_nodes
    a = np.zeros((n, n))
    for u, v in graph.edges:
        a[u, v] = 1.0
        a[v, u] = 1.0
    a_tilde = a + np.eye(n)
    if scheme == "raw_selfloop":
        return DenseMatrix.from_array(a_tilde)
    deg = a_tilde.sum(axis=1)
    if scheme == "sym_selfloop":
        inv_sqrt = 1.0 / np.sqrt(deg)
        return DenseMatrix.from_array(a_tilde * inv_sqrt[:, None] * inv_sqrt[None, :])
    if scheme == "row":
        return DenseMatrix.from_array(a_tilde / deg[:, None])
    raise ValueError(f"unknown normalization scheme {scheme!r}")


def ood_split(dataset: Dataset, seed: int) -> SplitSpec:
    """Size-shifted split: train/val on small graphs, test on large ones.

    Graphs at or below the median node count form the small group; 80% of
    it (shuffled by seed) trains and the rest validates. The test set is
    a size-|val| sample of the large group, a deliberate distribution
    shift in graph size. A short large group is taken whole with a
    warning rather than failing.
    """
    sizes = np.array([g.num_nodes for g in dataset.graphs])
    median = float(np.median(sizes))
    small = [i for i, s in enumerate(sizes) if s <= median]
    large = [i for i, s in enumerate(sizes) if s > median]
    if not small or not large:
        raise SplitError(
            f"size split degenerate: {len(small)} small / {len(large)} large graphs"
        )

    rng = np.random.default_rng(seed)
    small_perm = [small[i] for i in rng.permutation(len(small))]
    n_train = int(math.floor(0.8 * len(small)))
    train = small_perm[:n_train]
    val = small_perm[n_train:]
    if not train or not val:
        raise SplitError(f"small group of {len(small)} graphs cannot fill train and val")

    warnings: tuple[str, ...] = ()
    if len(large) < len(val):
        warnings = (
            f"large group has {len(large)} graphs, fewer than the requested "
            f"test size {len(val)}; using all of them",
        )
        test = [large[i] for i in rng.permutation(len(large))]
    else:
        test = [large[i] for i in rng.permutation(len(large))[: len(val)]]

    return SplitSpec(
        kind="ood",
        seed=seed,
        train=tuple(train),
        val=tuple(val),
        test=tuple(test),
        warnings=warnings,
    )


def random_split(dataset: Dataset, seed: int) -> SplitSpec:
    """80/10/10 shuffle split; val and test sizes floor, remainder trains."""
    n = len(dataset.graphs)
    if n < 10:
        raise SplitError(f"random split needs at least 10 graphs, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    return SplitSpec(
        kind="random",
        seed=seed,
        train=tuple(int(i) for i in perm[:n_train]),
        val=tuple(int(i) for i in perm[n_train : n_train + n_val]),
        test=tuple(int(i) for i in perm[n_train + n_val :]),
    )
