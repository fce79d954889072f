"""Tangent kernels, path kernels and the discrete kernel-machine decomposition.

For a model trained by full-batch gradient descent on the mean loss
``(1/N) sum_n L(y_hat_n, y_n)`` the final output satisfies, up to a
remainder of order ``sum_k eta_k**2``::

    N(x; w(K)) = N(x; w(0))
                 - (1/N) sum_n sum_k eta_k K(x, x_n; k) @ L'(y_hat_n(k), y_n)

where ``K(x, x~; k) = J(x; w(k)) J(x~; w(k))^T`` is the (q x q) tangent
kernel at snapshot ``k``. For a model linear in ``w`` the identity is exact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from tkl import nn
from tkl.data import LabeledDataset
from tkl.nn import ModelSpec
from tkl.training import LearningPath, TrainConfig, accuracy, loss_prime, train_full_batch

__all__ = [
    "GramMatrix", "DecompositionReport", "UndefinedSimilarityError", "PathMismatchError",
    "tangent_kernel", "tangent_kernel_matrix", "gram_matrix", "normalized_ntk",
    "discrete_path_kernel", "jacobi_eigvalsh", "is_psd", "domingos_rhs",
    "domingos_rhs_multi", "decompose", "StreamingAccumulator", "SweepRun",
    "decomposition_residual_sweep", "write_sweep_csv", "SWEEP_HEADER",
]

PSD_TOL = 1e-8
SWEEP_HEADER = ("eta", "K", "mean_residual", "max_residual", "train_accuracy")


class UndefinedSimilarityError(ValueError):
    """A self-kernel is zero, so the normalized kernel has no value."""


class PathMismatchError(ValueError):
    """The dataset does not match the one the path was trained on."""


def _pairwise_dot(A, B):
    # elementwise product then a reduction along d: the same summation order
    # for (a, b) and (b, a), so swapping arguments is bit-exact
    return np.sum(A[:, None, :] * B[None, :, :], axis=-1)


def tangent_kernel(spec: ModelSpec, w, x, x_tilde) -> float:
    """<grad_w N(x), grad_w N(x~)> for a scalar-output model."""
    if spec.output_dim != 1:
        raise ValueError("tangent_kernel needs q = 1; use tangent_kernel_matrix")
    a = nn.param_gradient(spec, w, x)
    b = nn.param_gradient(spec, w, x_tilde)
    return float(np.sum(a * b))


def tangent_kernel_matrix(spec: ModelSpec, w, x, x_tilde) -> np.ndarray:
    """J(x) J(x~)^T, shape (q, q)."""
    J = nn.batch_jacobian(spec, w, np.stack([np.asarray(x, dtype=np.float64),
                                             np.asarray(x_tilde, dtype=np.float64)]))
    return _pairwise_dot(J[0], J[1])


@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray
    snapshot_index: int = -1

    def eigenvalues(self) -> np.ndarray:
        return jacobi_eigvalsh(self.values)

    def is_psd(self, tol: float = PSD_TOL) -> bool:
        return is_psd(self.values, tol)


def gram_matrix(spec: ModelSpec, w, X, snapshot_index: int = -1) -> GramMatrix:
    """Tangent kernel between all pairs of rows of X.

    For q > 1 the result is the (N q) x (N q) block matrix of q x q kernels.
    """
    J = nn.batch_jacobian(spec, w, X)
    F = J.reshape(-1, J.shape[2])
    G = F @ F.T
    return GramMatrix(0.5 * (G + G.T), snapshot_index)


def normalized_ntk(spec: ModelSpec, w, x, x_tilde) -> float:
    """Cosine similarity of the feature vectors of x and x~."""
    a = nn.param_gradient(spec, w, x)
    b = nn.param_gradient(spec, w, x_tilde)
    kaa = float(np.sum(a * a))
    kbb = float(np.sum(b * b))
    if kaa <= 0.0 or kbb <= 0.0:
        raise UndefinedSimilarityError("zero self-kernel: normalized kernel undefined")
    return float(np.sum(a * b)) / math.sqrt(kaa * kbb)


def discrete_path_kernel(path: LearningPath, x, x_tilde) -> float:
    """sum_k eta_k K(x, x~; k) along a recorded path.

    With a strided path each snapshot stands in for ``stride`` steps and is
    weighted by ``eta_k * gap``.
    """
    if len(path) == 0:
        raise ValueError("empty learning path")
    spec = path.spec
    if spec.output_dim != 1:
        raise ValueError("discrete_path_kernel needs q = 1")
    X = np.stack([np.asarray(x, dtype=np.float64), np.asarray(x_tilde, dtype=np.float64)])
    total = 0.0
    for c, w in zip(path.quadrature_weights(), path.weights):
        if c == 0.0:
            continue
        J = nn.batch_jacobian(spec, w, X)[:, 0, :]
        total += c * float(np.sum(J[0] * J[1]))
    return total


# ------------------------------------------------------------ eigenvalues

def jacobi_eigvalsh(A, tol: float = 1e-14, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.

    Meant for small matrices (a few hundred rows at most).
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.array_equal(A, A.T):
        raise ValueError("matrix must be symmetric")
    scale = np.sqrt(np.sum(A * A))
    if n < 2 or scale == 0.0:
        return np.sort(np.diag(A))
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * scale:
            break
        for i in range(n - 1):
            for j in range(i + 1, n):
                aij = A[i, j]
                if abs(aij) <= 1e-300:
                    continue
                theta = (A[j, j] - A[i, i]) / (2.0 * aij)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.hypot(t, 1.0)
                s = t * c
                ai = A[:, i].copy()
                aj = A[:, j]
                A[:, i] = c * ai - s * aj
                A[:, j] = s * ai + c * aj
                ai = A[i, :].copy()
                aj = A[j, :]
                A[i, :] = c * ai - s * aj
                A[j, :] = s * ai + c * aj
                A[i, j] = A[j, i] = 0.0
    return np.sort(np.diag(A))


def is_psd(G, tol: float = PSD_TOL) -> bool:
    """min eigenvalue >= -tol * max eigenvalue."""
    ev = jacobi_eigvalsh(G)
    return bool(ev[0] >= -tol * max(ev[-1], 0.0))


# ----------------------------------------------------------- decomposition

@dataclass
class DecompositionReport:
    """One query's decomposition; vectors have length q."""
    query: np.ndarray
    lhs: np.ndarray
    bias: np.ndarray
    contributions: np.ndarray  # (N, q)
    steps: int
    rhs: np.ndarray = field(init=False)
    residual: float = field(init=False)

    def __post_init__(self):
        self.contributions = np.asarray(self.contributions, dtype=np.float64)
        self.rhs = self.bias - self.contributions.sum(axis=0)
        self.residual = float(np.linalg.norm(self.lhs - self.rhs))

    @property
    def relative_residual(self) -> float:
        return self.residual / max(1.0, float(np.linalg.norm(self.lhs)))

    def to_dict(self) -> dict:
        return {
            "query": self.query.tolist(),
            "lhs": self.lhs.tolist(),
            "bias": self.bias.tolist(),
            "rhs": self.rhs.tolist(),
            "residual": self.residual,
            "relative_residual": self.relative_residual,
            "steps": self.steps,
            "contributions": self.contributions.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _check_dataset(path: LearningPath, ds: LabeledDataset):
    spec = path.spec
    if ds.p != spec.input_dim or ds.q != spec.output_dim:
        raise PathMismatchError(f"dataset (p={ds.p}, q={ds.q}) does not match the model "
                                f"(p={spec.input_dim}, q={spec.output_dim})")
    rec = path.meta.get("dataset")
    if rec is not None and (rec["n"] != ds.n or rec["p"] != ds.p):
        raise PathMismatchError(f"path was trained on N={rec['n']}, p={rec['p']}; "
                                f"got N={ds.n}, p={ds.p}")


def _queries(spec, X):
    X = np.asarray(X, dtype=np.float64)
    return X[None, :] if X.ndim == 1 else X


def decompose(path: LearningPath, ds: LabeledDataset, X) -> list[DecompositionReport]:
    """Decompose N(x; w(K)) for every row of X by replaying the stored path.

    Each step's contribution is formed from the explicit q x q kernel blocks
    between queries and training samples.
    """
    _check_dataset(path, ds)
    spec = path.spec
    X = _queries(spec, X)
    Q, N = X.shape[0], ds.n
    contrib = np.zeros((Q, N, spec.output_dim))
    for c, w in zip(path.quadrature_weights(), path.weights):
        if c == 0.0:
            continue
        Jq = nn.batch_jacobian(spec, w, X)
        Jt = nn.batch_jacobian(spec, w, ds.inputs)
        Lp = loss_prime(nn.predict(spec, w, ds.inputs), ds.labels)
        # K[a, n] = Jq[a] Jt[n]^T, then applied to the loss-derivative vector
        Kb = np.einsum("aid,njd->anij", Jq, Jt)
        contrib += (c / N) * np.einsum("anij,nj->ani", Kb, Lp)
    bias = nn.predict(spec, path.initial, X)
    lhs = nn.predict(spec, path.final, X)
    return [DecompositionReport(X[a], lhs[a], bias[a], contrib[a], path.steps)
            for a in range(Q)]


def domingos_rhs(path: LearningPath, ds: LabeledDataset, x) -> DecompositionReport:
    """Decomposition of a scalar-output model at a single query."""
    if path.spec.output_dim != 1:
        raise ValueError("domingos_rhs needs q = 1; use domingos_rhs_multi")
    return decompose(path, ds, np.asarray(x, dtype=np.float64)[None, :])[0]


def domingos_rhs_multi(path: LearningPath, ds: LabeledDataset, x) -> DecompositionReport:
    """Vector-valued decomposition with q x q kernel blocks."""
    return decompose(path, ds, np.asarray(x, dtype=np.float64)[None, :])[0]


class StreamingAccumulator:
    """Builds the decomposition online while training runs.

    Memory is O(Q N q) regardless of the number of steps. Each update uses
    the pulled-back form ``K(x, x_n) L'_n = J(x) (J(x_n)^T L'_n)``, so it
    never materializes kernel blocks; :func:`decompose` does, which makes the
    two a useful cross-check.
    """

    def __init__(self, spec: ModelSpec, queries):
        self.spec = spec
        self.queries = _queries(spec, queries)
        self.bias = None
        self.contrib = None
        self.last_k = -1
        self.n_updates = 0

    def update(self, k: int, eta: float, w, ds: LabeledDataset, weight: float | None = None):
        """Add step k (taken with rate eta from parameters w) to the sums."""
        if k <= self.last_k:
            raise ValueError(f"update at step {k} after step {self.last_k}")
        if ds.p != self.spec.input_dim or ds.q != self.spec.output_dim:
            raise PathMismatchError("dataset does not match the model")
        if self.contrib is None:
            self.bias = nn.predict(self.spec, w, self.queries)
            self.contrib = np.zeros((self.queries.shape[0], ds.n, self.spec.output_dim))
        elif self.contrib.shape[1] != ds.n:
            raise PathMismatchError("dataset size changed between updates")
        c = eta if weight is None else weight
        Jt = nn.batch_jacobian(self.spec, w, ds.inputs)
        Lp = loss_prime(nn.predict(self.spec, w, ds.inputs), ds.labels)
        u = np.einsum("njd,nj->nd", Jt, Lp)
        Jq = nn.batch_jacobian(self.spec, w, self.queries)
        self.contrib += (c / ds.n) * np.einsum("aid,nd->ani", Jq, u)
        self.last_k = k
        self.n_updates += 1

    def callback(self, ds: LabeledDataset):
        """Adapter for the ``callback`` hook of :func:`train_full_batch`."""
        return lambda k, eta, w: self.update(k, eta, w, ds)

    def finalize(self, w_final) -> list[DecompositionReport]:
        lhs = nn.predict(self.spec, w_final, self.queries)
        if self.contrib is None:
            bias = lhs
            contrib = np.zeros((self.queries.shape[0], 0, self.spec.output_dim))
        else:
            bias, contrib = self.bias, self.contrib
        steps = self.last_k + 1
        return [DecompositionReport(self.queries[a], lhs[a], bias[a], contrib[a], steps)
                for a in range(self.queries.shape[0])]


# ------------------------------------------------------------------ sweep

class SweepRun(NamedTuple):
    spec: ModelSpec
    dataset: LabeledDataset
    w0: np.ndarray
    eta: float
    steps: int
    queries: np.ndarray


def decomposition_residual_sweep(runs: Sequence[SweepRun]) -> list[dict]:
    """Train each run with a streaming accumulator and summarize its residuals.

    Residuals are relative to max(1, |lhs|). ``train_accuracy`` is NaN for
    real-valued labels.
    """
    rows = []
    for run in runs:
        acc = StreamingAccumulator(run.spec, run.queries)
        path = train_full_batch(run.spec, run.w0, run.dataset,
                                TrainConfig(run.steps, run.eta, record=False),
                                callback=acc.callback(run.dataset))
        res = np.array([r.relative_residual for r in acc.finalize(path.final)])
        if run.dataset.label_kind == "real":
            train_acc = float("nan")
        else:
            train_acc = accuracy(run.spec, path.final, run.dataset)
        rows.append({"eta": float(run.eta), "K": int(run.steps),
                     "mean_residual": float(res.mean()), "max_residual": float(res.max()),
                     "train_accuracy": train_acc, "kind": run.spec.kind})
    return rows


def write_sweep_csv(rows, file) -> None:
    with Path(file).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow([f"{row['eta']:.17g}", row["K"], f"{row['mean_residual']:.17g}",
                             f"{row['max_residual']:.17g}", f"{row['train_accuracy']:.17g}"])
