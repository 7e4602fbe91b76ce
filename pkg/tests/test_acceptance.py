"""Acceptance gate: one test per release criterion.

Run ``pytest -s tests/test_acceptance.py`` to see one PASS/FAIL line per
criterion. Each test checks the numerical property at its stated tolerance
and, where a runtime budget applies, measures wall time against it.
"""

import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

import gt3lab.tensor as T
from gt3lab.analysis import layerwise_cka, linear_cka, roc_auc_binary
from gt3lab.augment import ViewSpec, adaptive_view, shuffle_attributes
from gt3lab.cli import SynthSpec, generate_synthetic
from gt3lab.graphdata import (
    Dataset,
    Graph,
    ParseError,
    ood_split,
    parse_tudataset,
    write_tudataset,
)
from gt3lab.models import (
    GnnConfig,
    ModelParams,
    classify,
    collect_grads,
    extractor_embedding,
    gnn_forward,
    init_params,
    main_loss,
    make_leaves,
)
from gt3lab.ssl import (
    SslSeeds,
    SslWeights,
    TrainStats,
    adaptation_constraint,
    constraint_node,
    decorrelation,
    global_contrastive_loss,
    local_contrastive_loss,
    local_pair_objective,
    project,
    ssl_loss,
)
from gt3lab.tensor import DenseMatrix
from gt3lab.theory import theorem1_sweep, theorem2_check
from gt3lab.ttt import (
    TrainConfig,
    TttConfig,
    evaluate,
    train_joint,
    train_task,
    ttt_adapt,
)


def _report(num: int, name: str, ok: bool, details: str) -> None:
    print(f"\n[criterion {num}] {name}: {'PASS' if ok else 'FAIL'} ({details})")
    assert ok, f"criterion {num} ({name}): {details}"


# ---------------------------------------------------------------------------
# 1. Curvature and gradient bounds of the softmax cross-entropy
# ---------------------------------------------------------------------------

def test_criterion_1_curvature_and_gradient_bounds():
    t0 = time.perf_counter()
    report = theorem1_sweep()  # 1000 logit vectors per class count in 2..10
    elapsed = time.perf_counter() - t0
    ok = (
        report.passed
        and report.violations == 0
        and report.checked == 9000
        and elapsed < 10.0
    )
    _report(
        1, "softmax-CE curvature/gradient bounds", ok,
        f"{report.checked} logit vectors, {report.violations} violations, "
        f"{elapsed:.1f}s < 10s",
    )


# ---------------------------------------------------------------------------
# 2. Strict main-loss decrease under aligned auxiliary steps
# ---------------------------------------------------------------------------

def test_criterion_2_aligned_descent_guarantee():
    t0 = time.perf_counter()
    report = theorem2_check(trials=500, epsilon=0.01)
    elapsed = time.perf_counter() - t0
    ok = (
        report.passed
        and report.violations == 0
        and report.checked > 0
        and report.checked + report.skipped == 500
        and elapsed < 30.0
    )
    _report(
        2, "auxiliary-step descent guarantee", ok,
        f"{report.checked} aligned instances of 500, "
        f"{report.violations} violations, {elapsed:.1f}s < 30s",
    )


# ---------------------------------------------------------------------------
# 3. Finite-difference integrity of every loss on a 5-node fixture
# ---------------------------------------------------------------------------

def test_criterion_3_all_loss_gradients_match_finite_differences():
    g = Graph(
        num_nodes=5,
        edges=((0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)),
        attributes=DenseMatrix.from_array(
            np.random.default_rng(3).normal(size=(5, 2))
        ),
        label=1,
    )
    cfg = GnnConfig(arch="gcn", num_layers=2, hidden_dim=3, shared_layers=1,
                    num_classes=2, attr_dim=2)
    params = init_params(cfg, seed=7)
    weights = SslWeights()
    seeds = SslSeeds(shuffle=5, view_a=6, view_b=7)
    vs = ViewSpec(kind="adaptive", seed=0)
    stats = TrainStats(
        mu=DenseMatrix.from_array(np.array([[0.1, 0.2, 0.3]])),
        sigma=DenseMatrix.from_array(np.eye(3) * 0.5),
        n=8,
    )
    # Views are fixed outside the loss so finite differences perturb only
    # parameters, never the augmentation draws.
    ga = adaptive_view(g, ViewSpec(kind="adaptive", seed=seeds.view_a))
    gb = adaptive_view(g, ViewSpec(kind="adaptive", seed=seeds.view_b))
    gv1 = adaptive_view(g, ViewSpec(kind="adaptive", seed=101))
    gv2 = adaptive_view(g, ViewSpec(kind="adaptive", seed=102))

    def losses(arrays):
        p = ModelParams(cfg, arrays)
        leaves = make_leaves(p)
        out = {}
        out["main_ce"] = main_loss(classify(g, leaves, cfg), g.label,
                                   cfg.num_classes)
        z0 = gnn_forward(g, leaves, cfg, head="ssl")
        z1 = gnn_forward(shuffle_attributes(g, seeds.shuffle), leaves, cfg,
                         head="ssl")
        out["global"] = global_contrastive_loss(z0, z1, leaves)
        z2 = gnn_forward(ga, leaves, cfg, head="ssl")
        z3 = gnn_forward(gb, leaves, cfg, head="ssl")
        out["decorrelation"] = decorrelation(project(z2, leaves))
        out["local_pair"] = local_pair_objective(z2, z3, 1, leaves,
                                                 weights.tau)
        out["local"] = local_contrastive_loss(z2, z3, leaves, weights.tau,
                                              weights.beta_decor)
        node, _ = ssl_loss(g, leaves, cfg, weights, seeds, vs)
        out["combined_ssl"] = node
        embs = [extractor_embedding(v, leaves, cfg) for v in (g, gv1, gv2)]
        out["constraint"] = constraint_node(stats, embs)
        out["joint"] = T.add(out["main_ce"], T.scale(node, weights.gamma))
        return out, leaves

    t0 = time.perf_counter()
    h = 1e-6
    worst_name, worst_ratio = "", 0.0
    for lname in ("main_ce", "global", "decorrelation", "local_pair",
                  "local", "combined_ssl", "constraint", "joint"):
        base, leaves = losses({k: v.copy() for k, v in params.arrays.items()})
        T.backward(base[lname])
        grads = collect_grads(leaves)
        for pname, arr in params.arrays.items():
            for idx in np.ndindex(arr.shape):
                ap = {k: v.copy() for k, v in params.arrays.items()}
                ap[pname][idx] += h
                am = {k: v.copy() for k, v in params.arrays.items()}
                am[pname][idx] -= h
                num = (losses(ap)[0][lname].value.item()
                       - losses(am)[0][lname].value.item()) / (2 * h)
                ana = grads[pname][idx]
                # relative tolerance 1e-4 with a 1e-7 absolute floor where
                # the gradient is too small for central differences
                ratio = abs(num - ana) / (1e-7 + 1e-4 * max(abs(num), abs(ana)))
                if ratio > worst_ratio:
                    worst_name, worst_ratio = f"{lname}/{pname}", ratio
    elapsed = time.perf_counter() - t0
    ok = worst_ratio <= 1.0 and elapsed < 60.0
    _report(
        3, "finite-difference gradient integrity", ok,
        f"8 losses, worst {worst_name} at {worst_ratio:.2e} of tolerance, "
        f"{elapsed:.1f}s < 60s",
    )


# ---------------------------------------------------------------------------
# 4. Closed-form loss values
# ---------------------------------------------------------------------------

def _head_leaves(d: int, identity_proj: bool = False):
    cfg = GnnConfig(arch="gcn", num_layers=1, hidden_dim=d, shared_layers=1,
                    num_classes=2, attr_dim=d)
    params = init_params(cfg, seed=0)
    if identity_proj:
        params.arrays["s.proj.w1"] = np.eye(d)
        params.arrays["s.proj.b1"][:] = 0.0
        params.arrays["s.proj.w2"] = np.eye(d)
        params.arrays["s.proj.b2"][:] = 0.0
    return make_leaves(params)


def test_criterion_4_closed_form_loss_oracles():
    errs = {}

    # Zero embeddings force the discriminator to 0.5 everywhere -> ln 2.
    leaves = _head_leaves(3)
    got = global_contrastive_loss(
        T.constant(DenseMatrix.zeros(4, 3)),
        T.constant(DenseMatrix.zeros(4, 3)),
        leaves,
    ).value.item()
    errs["global=ln2"] = abs(got - math.log(2.0))

    # Two orthonormal nodes under an identity projection at tau=1: the
    # positive cosine is 1 and both negatives are 0, so the log-ratio is
    # 1 - ln(e + 2) for either node.
    leaves = _head_leaves(2, identity_proj=True)
    z = T.constant(DenseMatrix.eye(2))
    expected = 1.0 - math.log(math.e + 2.0)
    for index in (0, 1):
        got = local_pair_objective(z, z, index, leaves, tau=1.0).value.item()
        errs[f"local_pair[{index}]"] = abs(got - expected)

    # Orthonormal projected columns give zero penalty; all-zero columns
    # give exactly d.
    errs["decor=0"] = abs(decorrelation(T.constant(DenseMatrix.eye(3)))
                          .value.item())
    errs["decor=d"] = abs(decorrelation(T.constant(DenseMatrix.zeros(4, 3)))
                          .value.item() - 3.0)

    # Identical statistics give a zero constraint.
    stats = TrainStats(
        mu=DenseMatrix.from_array(np.array([[0.3, -0.2, 1.0]])),
        sigma=DenseMatrix.from_array(np.eye(3) * 0.7),
        n=6,
    )
    errs["constraint=0"] = abs(adaptation_constraint(stats, stats))

    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-9
    _report(
        4, "closed-form loss oracles", ok,
        f"{len(errs)} oracles, worst {worst} err {errs[worst]:.2e} <= 1e-9",
    )


# ---------------------------------------------------------------------------
# 5. Pipeline identities
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_experiment():
    ds = generate_synthetic(SynthSpec(num_graphs=24, size_low=5, size_high=12,
                                      seed=0))
    split = ood_split(ds, seed=0)
    cfg = GnnConfig(arch="gcn", num_layers=2, hidden_dim=4, shared_layers=1,
                    num_classes=2, attr_dim=ds.attr_dim)
    weights = SslWeights()
    tcfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=8, gamma=0.5,
                       seed=1)
    train_g = [ds.graphs[i] for i in split.train]
    val_g = [ds.graphs[i] for i in split.val]
    snap = train_joint(train_g, cfg, tcfg, weights, val_graphs=val_g)
    return SimpleNamespace(ds=ds, split=split, cfg=cfg, weights=weights,
                           train_g=train_g, val_g=val_g, snap=snap)


def test_criterion_5_pipeline_identities(small_experiment, tmp_path):
    ex = small_experiment
    parts = []

    # Zero adaptation steps must reproduce the no-adaptation mode exactly.
    joint = evaluate(ex.ds, ex.split.test, ex.snap, mode="JOINT",
                     weights=ex.weights)
    gt3_zero = evaluate(ex.ds, ex.split.test, ex.snap, mode="GT3",
                        ttt_cfg=TttConfig(steps=0), weights=ex.weights)
    pj, pg = tmp_path / "joint.csv", tmp_path / "gt3zero.csv"
    joint.to_csv(str(pj))
    gt3_zero.to_csv(str(pg))
    parts.append(("gt3_steps0_equals_joint", pj.read_bytes() == pg.read_bytes()))

    # A zero SSL weight in joint training must match supervised-only
    # training bit for bit.
    tcfg0 = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=8, gamma=0.0,
                        seed=1)
    a = train_joint(ex.train_g, ex.cfg, tcfg0, ex.weights, val_graphs=ex.val_g)
    b = train_task(ex.train_g, ex.cfg, tcfg0, ex.weights, val_graphs=ex.val_g,
                   task="main")
    same = (set(a.arrays) == set(b.arrays)
            and all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays))
    parts.append(("gamma0_equals_supervised_only", same))

    # Adaptation must leave every main-branch parameter untouched.
    idx0 = ex.split.test[0]
    result = ttt_adapt(ex.ds.graphs[idx0], ex.snap, TttConfig(steps=3),
                       ex.weights, sample_key=idx0)
    main_keys = [k for k in ex.snap.arrays if k.startswith("m.")]
    untouched = bool(main_keys) and all(
        np.array_equal(result.params.arrays[k], ex.snap.arrays[k])
        for k in main_keys
    )
    parts.append(("main_branch_frozen_under_adaptation",
                  untouched and not result.fell_back))

    # Per-sample adaptation must not depend on evaluation order.
    forward = evaluate(ex.ds, ex.split.test, ex.snap, mode="GT3",
                       ttt_cfg=TttConfig(steps=2), weights=ex.weights)
    backward = evaluate(ex.ds, tuple(reversed(ex.split.test)), ex.snap,
                        mode="GT3", ttt_cfg=TttConfig(steps=2),
                        weights=ex.weights)
    pf, pb = tmp_path / "fwd.csv", tmp_path / "bwd.csv"
    forward.to_csv(str(pf))
    backward.to_csv(str(pb))
    parts.append(("order_permutation_invariance",
                  pf.read_bytes() == pb.read_bytes()))

    failed = [name for name, good in parts if not good]
    _report(
        5, "pipeline identities", not failed,
        "all 4 identities hold" if not failed else f"failed: {failed}",
    )


# ---------------------------------------------------------------------------
# 6. Representation-similarity index and layerwise divergence
# ---------------------------------------------------------------------------

def test_criterion_6_representation_similarity_suite():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 6))
    y = rng.normal(size=(40, 4))
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    algebra = {
        "self": abs(linear_cka(x, x) - 1.0),
        "orthogonal": abs(linear_cka(x @ q, y) - linear_cka(x, y)),
        "scale": abs(linear_cka(3.7 * x, y) - linear_cka(x, y)),
    }
    symmetry = abs(linear_cka(x, y) - linear_cka(y, x))
    algebra_ok = max(algebra.values()) <= 1e-9 and symmetry <= 1e-12

    t0 = time.perf_counter()
    ds = generate_synthetic(SynthSpec(num_graphs=60, seed=0))
    first, last = [], []
    for seed in (0, 1, 2):
        split = ood_split(ds, seed=seed)
        train_g = [ds.graphs[i] for i in split.train]
        val_g = [ds.graphs[i] for i in split.val]
        cfg = GnnConfig(arch="gcn", num_layers=3, hidden_dim=8,
                        shared_layers=3, num_classes=2, attr_dim=ds.attr_dim)
        tcfg = TrainConfig(epochs=8, learning_rate=5e-3, batch_size=16,
                           gamma=0.5, seed=100 + seed)
        weights = SslWeights()
        m = train_task(train_g, cfg, tcfg, weights, val_graphs=val_g,
                       task="main")
        c = train_task(train_g, cfg, tcfg, weights, val_graphs=val_g,
                       task="ssl")
        report = layerwise_cka([("M", m), ("C", c)], val_g[:64])
        first.append(report.value("M-C", 1))
        last.append(report.value("M-C", 3))
    elapsed = time.perf_counter() - t0
    med1, med3 = float(np.median(first)), float(np.median(last))
    ok = algebra_ok and med1 >= med3
    _report(
        6, "CKA invariances and layer divergence", ok,
        f"algebra worst {max(algebra.values()):.1e}, symmetry "
        f"{symmetry:.1e}, median layer-1 {med1:.4f} >= layer-3 {med3:.4f} "
        f"({elapsed:.0f}s)",
    )


# ---------------------------------------------------------------------------
# 7. Desk-scale end-to-end run on the size-shifted synthetic dataset
# ---------------------------------------------------------------------------

def test_criterion_7_desk_scale_adaptation_benefit():
    t0 = time.perf_counter()
    ds = generate_synthetic(SynthSpec(seed=0))  # 120 graphs, 2 classes
    weights = SslWeights()
    raw_accs, gt3_accs = [], []
    for split_seed in (0, 1, 2):
        split = ood_split(ds, seed=split_seed)
        train_g = [ds.graphs[i] for i in split.train]
        val_g = [ds.graphs[i] for i in split.val]
        for init_seed in (10, 11):
            cfg = GnnConfig(arch="gcn", num_layers=2, hidden_dim=32,
                            shared_layers=1, readout="max", num_classes=2,
                            attr_dim=ds.attr_dim)
            snap_raw = train_joint(
                train_g, cfg,
                TrainConfig(epochs=60, learning_rate=5e-3, batch_size=16,
                            gamma=0.0, seed=init_seed),
                weights, val_graphs=val_g,
            )
            snap_joint = train_joint(
                train_g, cfg,
                TrainConfig(epochs=60, learning_rate=5e-3, batch_size=16,
                            gamma=0.5, seed=init_seed),
                weights, val_graphs=val_g,
            )
            raw_accs.append(
                evaluate(ds, split.test, snap_raw, mode="RAW").accuracy
            )
            gt3_accs.append(
                evaluate(ds, split.test, snap_joint, mode="GT3",
                         ttt_cfg=TttConfig(steps=10, learning_rate=1e-4),
                         weights=weights).accuracy
            )
    elapsed = time.perf_counter() - t0
    raw_med = float(np.median(raw_accs))
    gt3_med = float(np.median(gt3_accs))
    wins = sum(a >= raw_med for a in gt3_accs)
    ok = gt3_med >= raw_med - 0.02 and wins >= 3 and elapsed < 300.0
    _report(
        7, "desk-scale adaptation benefit", ok,
        f"RAW median {raw_med:.3f}, GT3 median {gt3_med:.3f}, GT3 >= RAW "
        f"median in {wins}/6 runs, {elapsed:.0f}s < 300s",
    )


# ---------------------------------------------------------------------------
# 8. Parser round-trip, malformed inputs, and the size-shift split property
# ---------------------------------------------------------------------------

def _write_tu_files(directory, name, *, a, ind, lab, attr=None, nlab=None):
    directory.mkdir(parents=True, exist_ok=True)
    files = {"A": a, "graph_indicator": ind, "graph_labels": lab,
             "node_attributes": attr, "node_labels": nlab}
    for suffix, text in files.items():
        if text is not None:
            (directory / f"{name}_{suffix}.txt").write_text(
                text, encoding="utf-8")


def test_criterion_8_parser_and_split_properties(tmp_path):
    parts = []

    # Exact write -> parse round trip.
    rng = np.random.default_rng(4)
    graphs = []
    for i in range(3):
        n = 3 + i
        edges = tuple((j, j + 1) for j in range(n - 1))
        graphs.append(Graph(
            num_nodes=n,
            edges=edges,
            attributes=DenseMatrix.from_array(rng.normal(size=(n, 2))),
            label=i % 2,
        ))
    ds = Dataset(name="RT", graphs=tuple(graphs), num_classes=2)
    write_tudataset(ds, str(tmp_path), "RT")
    back = parse_tudataset(str(tmp_path), "RT")
    roundtrip = len(back.graphs) == len(ds.graphs) and all(
        g0.num_nodes == g1.num_nodes
        and g0.edges == g1.edges
        and g0.label == g1.label
        and g0.attributes == g1.attributes
        for g0, g1 in zip(ds.graphs, back.graphs)
    )
    parts.append(("roundtrip", roundtrip))

    # Every malformed input raises a parse error naming the problem.
    cases = [
        ({"a": "1 2\n"}, "expected 'i, j'"),
        ({"a": "1, x\n"}, "expected an integer"),
        ({"a": "1, 9\n"}, "not assigned to any graph"),
        ({"a": "1, 3\n"}, "crosses graphs"),
        ({"attr": "1.0\n"}, "attribute rows"),
        ({"attr": "1.0\n2.0, 3.0\n3.0\n4.0\n"}, "row has 2 values"),
        ({"attr": "1.0\nnan\n3.0\n4.0\n"}, "non-finite"),
        ({"attr": "1.0\noops\n3.0\n4.0\n"}, "expected a number"),
        ({"lab": "0\n"}, "labels for 2 graphs"),
    ]
    caught = 0
    for k, (overrides, fragment) in enumerate(cases):
        base = dict(a="1, 2\n2, 1\n3, 4\n4, 3\n", ind="1\n1\n2\n2\n",
                    lab="0\n1\n", attr="1.0\n2.0\n3.0\n4.0\n")
        base.update(overrides)
        d = tmp_path / f"bad{k}"
        _write_tu_files(d, "BAD", **base)
        try:
            parse_tudataset(str(d), "BAD")
        except ParseError as exc:
            if fragment in str(exc):
                caught += 1
    parts.append(("malformed_inputs", caught == len(cases)))

    # Size-shifted splits always put at-least-median-sized graphs in test.
    rng = np.random.default_rng(2024)
    holds = 0
    for trial in range(50):
        num = int(rng.integers(12, 40))
        lo = int(rng.integers(4, 10))
        hi = lo + int(rng.integers(4, 15))
        sds = generate_synthetic(SynthSpec(num_graphs=num, size_low=lo,
                                           size_high=hi, seed=trial))
        split = ood_split(sds, seed=trial)
        median = float(np.median([g.num_nodes for g in sds.graphs]))
        if min(sds.graphs[i].num_nodes for i in split.test) >= median:
            holds += 1
    parts.append(("ood_split_property", holds == 50))

    failed = [name for name, good in parts if not good]
    _report(
        8, "parser and split properties", not failed,
        f"roundtrip exact, {caught}/9 malformed cases, size property on "
        f"{holds}/50 datasets" if not failed else f"failed: {failed}",
    )


# ---------------------------------------------------------------------------
# 9. Rank-based ROC-AUC against a brute-force pairwise oracle
# ---------------------------------------------------------------------------

def _brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def test_criterion_9_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 60))
        scores = np.round(rng.random(n), 2)  # quantization forces ties
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        worst = max(worst, abs(roc_auc_binary(scores, labels)
                               - _brute_auc(scores, labels)))
    ok = worst <= 1e-12
    _report(
        9, "ROC-AUC vs brute-force oracle", ok,
        f"100 score/label vectors, worst gap {worst:.2e} <= 1e-12",
    )
