"""Numerical verification of the smoothness and descent guarantees.

Two facts are checked by direct computation rather than by proof. First,
the softmax cross-entropy Hessian with respect to logits, diag(p) - p p^T,
is positive semidefinite with eigenvalues at most 2, and the gradient
p - onehot(y) has L2 norm at most sqrt(2); this makes the pooled-linear
model's loss beta-smooth in its parameters. Second, under that
smoothness, one gradient step on an auxiliary loss with step size
eta = epsilon / (beta G^2) strictly decreases the main loss whenever the
two gradients' inner product exceeds epsilon.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DenseMatrix


class AsymmetricError(ValueError):
    """The eigensolver input is not symmetric within tolerance."""


def softmax_probs(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    e = np.exp(z - z.max())
    return e / e.sum()


def ce_value(logits, label: int) -> float:
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    zmax = z.max()
    return float(np.log(np.exp(z - zmax).sum()) + zmax - z[label])


def ce_gradient(logits, label: int) -> np.ndarray:
    """Gradient of cross-entropy in the logits: p - onehot(label)."""
    p = softmax_probs(logits)
    if not 0 <= label < p.size:
        raise ValueError(f"label {label} outside [0, {p.size})")
    g = p.copy()
    g[label] -= 1.0
    return g


def softmax_ce_hessian(logits, label: int = 0) -> np.ndarray:
    """Hessian of cross-entropy in the logits: diag(p) - p p^T.

    The label only enters the gradient, not the curvature; it is accepted
    for interface symmetry and bounds checking.
    """
    p = softmax_probs(logits)
    if not 0 <= label < p.size:
        raise ValueError(f"label {label} outside [0, {p.size})")
    return np.diag(p) - np.outer(p, p)


def _jacobi_batch(mats: np.ndarray, tol: float, max_sweeps: int) -> np.ndarray:
    """Cyclic Jacobi rotations applied in data-parallel form.

    The same pivot schedule runs across the whole batch; converged
    matrices see identity rotations because their off-diagonal entries
    are below threshold.
    """
    a = np.array(mats, dtype=np.float64)
    b, n, _ = a.shape
    if n == 1:
        return a[:, :, 0]
    idx = np.arange(b)
    off_mask = 1.0 - np.eye(n)
    for _ in range(max_sweeps):
        if (np.abs(a * off_mask).max(axis=(1, 2)) <= tol).all():
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p, q]
                active = np.abs(apq) > tol
                if not active.any():
                    continue
                app = a[:, p, p]
                aqq = a[:, q, q]
                safe_apq = np.where(active, apq, 1.0)
                tau = (aqq - app) / (2.0 * safe_apq)
                root = np.sqrt(1.0 + tau * tau)
                sgn = np.where(tau >= 0.0, 1.0, -1.0)
                t = np.where(active, sgn / (np.abs(tau) + root), 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rowp = a[idx, p, :].copy()
                rowq = a[idx, q, :].copy()
                a[idx, p, :] = c[:, None] * rowp - s[:, None] * rowq
                a[idx, q, :] = s[:, None] * rowp + c[:, None] * rowq
                colp = a[idx, :, p].copy()
                colq = a[idx, :, q].copy()
                a[idx, :, p] = c[:, None] * colp - s[:, None] * colq
                a[idx, :, q] = s[:, None] * colp + c[:, None] * colq
                a[idx, p, q] = np.where(active, 0.0, a[idx, p, q])
                a[idx, q, p] = a[idx, p, q]
    diags = a[:, np.arange(n), np.arange(n)]
    return np.sort(diags, axis=1)


def jacobi_eigenvalues(matrix, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, ascending, via cyclic Jacobi."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise T.ShapeError(f"expected a square matrix, got {a.shape}")
    if np.abs(a - a.T).max() > 1e-10:
        raise AsymmetricError("matrix is not symmetric within 1e-10")
    sym = (a + a.T) / 2.0
    return _jacobi_batch(sym[None, :, :], tol, max_sweeps)[0]


def check_psd_and_smooth(
    hessian, psd_tol: float = 1e-9, smooth_bound: float = 2.0
) -> tuple[float, float, bool]:
    """Eigenvalue range of a symmetric Hessian and whether it sits inside
    [-psd_tol, smooth_bound + psd_tol]."""
    eigs = jacobi_eigenvalues(hessian)
    lo, hi = float(eigs[0]), float(eigs[-1])
    return lo, hi, lo >= -psd_tol and hi <= smooth_bound + psd_tol


@dataclass(frozen=True)
class TheoremReport:
    theorem: str
    trials: int
    checked: int
    skipped: int
    violations: int
    worst: dict[str, float] = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    elapsed_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_json_dict(self) -> dict:
        return {
            "theorem": self.theorem,
            "trials": self.trials,
            "checked": self.checked,
            "skipped": self.skipped,
            "violations": self.violations,
            "passed": self.passed,
            "worst": self.worst,
            "params": self.params,
            "elapsed_seconds": self.elapsed_seconds,
        }

    def to_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def gradient_norm_check(
    trials: int = 1000, c_range: tuple[int, int] = (2, 10), seed: int = 0
) -> TheoremReport:
    """Sample random logits/labels and verify ||p - onehot||_2 <= sqrt(2)."""
    rng = np.random.default_rng(seed)
    start = time.monotonic()
    bound = np.sqrt(2.0)
    worst = 0.0
    violations = 0
    for _ in range(trials):
        c = int(rng.integers(c_range[0], c_range[1] + 1))
        spread = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
        logits = rng.normal(0.0, spread, size=c)
        label = int(rng.integers(c))
        norm = float(np.linalg.norm(ce_gradient(logits, label)))
        worst = max(worst, norm)
        if norm > bound + 1e-9:
            violations += 1
    return TheoremReport(
        theorem="grad-norm",
        trials=trials,
        checked=trials,
        skipped=0,
        violations=violations,
        worst={"max_grad_norm": worst, "bound": float(bound)},
        params={"c_range": list(c_range), "seed": seed},
        elapsed_seconds=time.monotonic() - start,
    )


def theorem1_sweep(
    trials_per_c: int = 1000,
    c_range: tuple[int, int] = (2, 10),
    seed: int = 0,
    psd_tol: float = 1e-9,
) -> TheoremReport:
    """Eigenvalue and gradient-norm bounds over random logit vectors.

    For every class count C in c_range, draws trials_per_c logit vectors
    across several orders of magnitude of scale, forms the softmax
    cross-entropy Hessian, and checks min eig >= -psd_tol, max eig <=
    2 + psd_tol, gradient norm <= sqrt(2) + psd_tol.
    """
    rng = np.random.default_rng(seed)
    start = time.monotonic()
    violations = 0
    checked = 0
    min_eig = np.inf
    max_eig = -np.inf
    max_norm = 0.0
    for c in range(c_range[0], c_range[1] + 1):
        spreads = np.exp(rng.uniform(np.log(0.1), np.log(10.0), size=trials_per_c))
        logits = rng.normal(0.0, 1.0, size=(trials_per_c, c)) * spreads[:, None]
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        hessians = probs[:, :, None] * np.eye(c) - probs[:, :, None] * probs[:, None, :]
        eigs = _jacobi_batch(hessians, tol=1e-12, max_sweeps=100)
        labels = rng.integers(0, c, size=trials_per_c)
        grads = probs.copy()
        grads[np.arange(trials_per_c), labels] -= 1.0
        norms = np.linalg.norm(grads, axis=1)

        checked += trials_per_c
        min_eig = min(min_eig, float(eigs[:, 0].min()))
        max_eig = max(max_eig, float(eigs[:, -1].max()))
        max_norm = max(max_norm, float(norms.max()))
        violations += int((eigs[:, 0] < -psd_tol).sum())
        violations += int((eigs[:, -1] > 2.0 + psd_tol).sum())
        violations += int((norms > np.sqrt(2.0) + psd_tol).sum())
    return TheoremReport(
        theorem="theorem-1",
        trials=checked,
        checked=checked,
        skipped=0,
        violations=violations,
        worst={
            "min_eigenvalue": min_eig,
            "max_eigenvalue": max_eig,
            "max_grad_norm": max_norm,
        },
        params={
            "trials_per_c": trials_per_c,
            "c_range": list(c_range),
            "seed": seed,
            "psd_tol": psd_tol,
        },
        elapsed_seconds=time.monotonic() - start,
    )


def _random_sgc_instance(rng: np.random.Generator) -> dict:
    """A small random pooled-linear classification instance."""
    n = int(rng.integers(3, 9))
    f = int(rng.integers(2, 6))
    c = int(rng.integers(2, 6))
    hops = int(rng.integers(1, 4))
    adj = np.zeros((n, n))
    for u in range(n - 1):
        for v in range(u + 1, n):
            if rng.random() < 0.4:
                adj[u, v] = adj[v, u] = 1.0
    a_tilde = adj + np.eye(n)
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    prop = a_tilde * inv_sqrt[:, None] * inv_sqrt[None, :]
    x = rng.normal(0.0, 1.0, size=(n, f))
    h = x
    for _ in range(hops):
        h = prop @ h
    z = h.sum(axis=0, keepdims=True)
    return {
        "pooled": z,
        "features": h,
        "theta": rng.normal(0.0, 1.0, size=(f, c)),
        "label": int(rng.integers(c)),
        "n": n,
        "f": f,
        "c": c,
    }


def _quadratic_aux_grad(theta: np.ndarray, target: np.ndarray):
    value = float(((theta - target) ** 2).sum())
    return value, 2.0 * (theta - target)


def _contrastive_aux_grad(inst: dict, theta: np.ndarray, rng: np.random.Generator):
    """Global-contrastive-style auxiliary loss through the pooled-linear
    embedding, differentiated by the tape."""
    h = inst["features"]
    perm = rng.permutation(h.shape[0])
    theta_leaf = T.leaf(DenseMatrix.from_array(theta))
    z0 = T.matmul(T.constant(DenseMatrix.from_array(h)), theta_leaf)
    z1 = T.matmul(T.constant(DenseMatrix.from_array(h[perm])), theta_leaf)
    summary = T.sigmoid(T.mean_rows(z0))
    pos = T.clip(T.sigmoid(T.matmul(z0, T.transpose(summary))), 1e-7, 1 - 1e-7)
    neg = T.clip(T.sigmoid(T.matmul(z1, T.transpose(summary))), 1e-7, 1 - 1e-7)
    ones = T.constant(DenseMatrix.ones(h.shape[0], 1))
    loss = T.scale(
        T.add(T.sum_all(T.log(pos)), T.sum_all(T.log(T.sub(ones, neg)))),
        -1.0 / (2.0 * h.shape[0]),
    )
    T.backward(loss)
    return loss.value.item(), np.array(theta_leaf._grad)


def theorem2_check(
    trials: int = 500,
    epsilon: float = 0.01,
    seed: int = 0,
    aux_kind: str = "quadratic",
) -> TheoremReport:
    """Descent of the main loss after one auxiliary-gradient step.

    For each random instance: beta is 1.1 * 2 * ||z||^2 (the smoothness
    constant of the pooled-linear cross-entropy with 10% headroom), G is
    the larger of the two gradient norms at theta, and eta = epsilon /
    (beta * G^2). Whenever <grad L_m, grad L_aux> > epsilon the step
    theta - eta * grad L_aux must strictly decrease L_m; every qualifying
    trial is checked and premise-failing trials are recorded as skipped.
    """
    if aux_kind not in ("quadratic", "contrastive"):
        raise ValueError(f"aux_kind must be quadratic or contrastive, got {aux_kind!r}")
    rng = np.random.default_rng(seed)
    start = time.monotonic()
    checked = 0
    skipped = 0
    violations = 0
    worst_decrease = np.inf
    worst_ip = 0.0
    for _ in range(trials):
        inst = _random_sgc_instance(rng)
        z = inst["pooled"]
        theta = inst["theta"]
        label = inst["label"]
        beta = 1.1 * 2.0 * float((z * z).sum())

        logits = z @ theta
        main_grad = z.T @ ce_gradient(logits, label).reshape(1, -1)
        if aux_kind == "quadratic":
            target = rng.normal(0.0, 1.0, size=theta.shape)
            _, aux_grad = _quadratic_aux_grad(theta, target)
        else:
            _, aux_grad = _contrastive_aux_grad(inst, theta, rng)

        inner = float((main_grad * aux_grad).sum())
        if inner <= epsilon:
            skipped += 1
            continue
        checked += 1
        g_bound = max(
            float(np.linalg.norm(main_grad)), float(np.linalg.norm(aux_grad))
        )
        eta = epsilon / (beta * g_bound**2)
        theta_next = theta - eta * aux_grad
        before = ce_value(logits, label)
        after = ce_value(z @ theta_next, label)
        decrease = before - after
        worst_decrease = min(worst_decrease, decrease)
        worst_ip = max(worst_ip, inner)
        if not after < before:
            violations += 1
    return TheoremReport(
        theorem="theorem-2",
        trials=trials,
        checked=checked,
        skipped=skipped,
        violations=violations,
        worst={
            "min_decrease": float(worst_decrease) if checked else 0.0,
            "max_inner_product": worst_ip,
        },
        params={"epsilon": epsilon, "seed": seed, "aux_kind": aux_kind},
        elapsed_seconds=time.monotonic() - start,
    )
