"""Feature-space analyses of a trained model.

Neighbors under the normalized tangent kernel versus Euclidean distance,
linear probes on feature vectors, the embedded last-layer regressor, PCA
of feature vectors and the radius of a 2-D decision boundary.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tkl import nn
from tkl.data import LabeledDataset
from tkl.kernel import UndefinedSimilarityError
from tkl.nn import ModelSpec, ParamVector
from tkl.training import LearningPath

__all__ = [
    "DEFAULT_LAMBDAS", "NeighborReport", "LinearProbe", "ProbeConfig",
    "feature_matrix", "ntk_similarities", "ntk_topk", "euclidean_topk",
    "jaccard", "neighbor_sweep", "linear_probe_train", "probe_from_regressor",
    "embedded_regressor", "pca_project", "decision_radius",
    "write_neighbors_csv", "write_probe_csv", "write_pca_csv",
]

DEFAULT_LAMBDAS = (0.1, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)


def feature_matrix(path: LearningPath, ds: LabeledDataset, k: int) -> np.ndarray:
    """Rows phi(x_n) = grad_w N(x_n; w(k)), shape (N, d)."""
    if path.spec.output_dim != 1:
        raise ValueError("feature_matrix needs a scalar-output model")
    return nn.batch_jacobian(path.spec, path.weights_at(k), ds.inputs)[:, 0, :]


def ntk_similarities(features: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Normalized kernel between one feature vector and every row of ``features``."""
    norms = np.sqrt(np.einsum("nd,nd->n", features, features))
    nq = np.sqrt(phi @ phi)
    if nq == 0.0 or np.any(norms == 0.0):
        raise UndefinedSimilarityError("zero self-kernel in neighbor ranking")
    return (features @ phi) / (norms * nq)


def _rank(keys: np.ndarray, k: int) -> np.ndarray:
    # ascending keys, ties by ascending index
    order = np.lexsort((np.arange(keys.shape[0]), keys))
    return order[:min(k, keys.shape[0])]


def ntk_topk(features, phi, k: int = 100):
    """Indices and similarities of the k most similar rows, descending."""
    s = ntk_similarities(features, phi)
    idx = _rank(-s, k)
    return idx, s[idx]


def euclidean_topk(ds: LabeledDataset | np.ndarray, query, k: int = 100) -> np.ndarray:
    """Indices of the k nearest rows by Euclidean distance, ties by index."""
    X = ds.inputs if isinstance(ds, LabeledDataset) else np.asarray(ds, dtype=np.float64)
    d = np.sum((X - np.asarray(query, dtype=np.float64)) ** 2, axis=1)
    return _rank(d, k)


def jaccard(a, b) -> float:
    a, b = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@dataclass
class NeighborReport:
    direction: np.ndarray
    lambdas: tuple
    snapshot: int
    ntk_indices: list = field(default_factory=list)
    ntk_similarities: list = field(default_factory=list)
    euclidean_indices: list = field(default_factory=list)
    euclidean_distances: list = field(default_factory=list)
    overlaps: list = field(default_factory=list)

    @property
    def mean_overlap(self) -> float:
        return float(np.mean(self.overlaps))


def neighbor_sweep(path: LearningPath, ds: LabeledDataset, u, lambdas=DEFAULT_LAMBDAS,
                   k: int = 100, snapshot: int | None = None) -> NeighborReport:
    """Compare NTK and Euclidean neighbors of the queries lambda * u.

    The kernel is taken at step K-1 unless ``snapshot`` says otherwise.
    """
    u = np.asarray(u, dtype=np.float64)
    if abs(np.linalg.norm(u) - 1.0) > 1e-12:
        raise ValueError("direction must be a unit vector")
    snap = max(path.steps - 1, 0) if snapshot is None else snapshot
    spec = path.spec
    w = path.weights_at(snap)
    F = nn.batch_jacobian(spec, w, ds.inputs)[:, 0, :]
    queries = np.outer(np.asarray(lambdas, dtype=np.float64), u)
    Fq = nn.batch_jacobian(spec, w, queries)[:, 0, :]
    rep = NeighborReport(u, tuple(float(v) for v in lambdas), snap)
    for q, phi in zip(queries, Fq):
        idx, sim = ntk_topk(F, phi, k)
        eidx = euclidean_topk(ds, q, k)
        rep.ntk_indices.append(idx)
        rep.ntk_similarities.append(sim)
        rep.euclidean_indices.append(eidx)
        rep.euclidean_distances.append(np.linalg.norm(ds.inputs[eidx] - q, axis=1))
        rep.overlaps.append(jaccard(idx, eidx))
    return rep


# ------------------------------------------------------------------ probe

@dataclass(frozen=True)
class ProbeConfig:
    margin: float = 1.0
    l2: float = 1e-4
    steps: int = 5000
    lr: float = 1e-2


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: float
    steps: int = 0
    hinge_loss: float = float("nan")
    train_accuracy: float = float("nan")

    def decision(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weight + self.bias

    def predict(self, features) -> np.ndarray:
        return np.where(self.decision(features) >= 0.0, 1.0, -1.0)

    def accuracy(self, features, labels) -> float:
        return float(np.mean(self.predict(features) == np.ravel(labels)))


def linear_probe_train(features, labels, config: ProbeConfig = ProbeConfig()) -> LinearProbe:
    """L2-regularized hinge loss, full-batch subgradient descent from zero.

    Objective: mean(max(0, margin - y (F v + c))) + l2/2 |v|^2.
    """
    F = np.asarray(features, dtype=np.float64)
    y = np.ravel(np.asarray(labels, dtype=np.float64))
    if F.ndim != 2 or F.shape[0] != y.shape[0]:
        raise ValueError(f"features {F.shape} do not match {y.shape[0]} labels")
    if not np.all(np.abs(y) == 1):
        raise ValueError("probe labels must be -1 or +1")
    if np.all(y == y[0]):
        raise ValueError("probe needs samples of both classes")
    N = F.shape[0]
    v = np.zeros(F.shape[1])
    c = 0.0
    for _ in range(config.steps):
        active = (y * (F @ v + c)) < config.margin
        ya = y[active]
        gv = config.l2 * v - ya @ F[active] / N
        gc = -ya.sum() / N
        v -= config.lr * gv
        c -= config.lr * gc
    m = y * (F @ v + c)
    loss = float(np.mean(np.maximum(0.0, config.margin - m)) + 0.5 * config.l2 * v @ v)
    probe = LinearProbe(v, float(c), config.steps, loss)
    probe.train_accuracy = probe.accuracy(F, y)
    return probe


def embedded_regressor(spec: ModelSpec, w) -> np.ndarray:
    """Vector a with <phi(x), a> = N(x; w) for every x.

    a copies the last affine layer's weights and bias into their own
    coordinates and is zero elsewhere.
    """
    data = w.data if isinstance(w, ParamVector) else np.asarray(w, dtype=np.float64)
    if spec.kind == "linear":
        return data.copy()
    if spec.kind == "mlp":
        names = ("W1", "b1")
    else:
        last = spec.n_blocks - 1
        names = (f"block{last}.conv2.weight", f"block{last}.conv2.bias")
    a = np.zeros_like(data)
    for seg in spec.layout():
        if seg.name in names:
            a[seg.offset:seg.offset + seg.size] = data[seg.offset:seg.offset + seg.size]
    return a


def probe_from_regressor(spec: ModelSpec, w) -> LinearProbe:
    """The probe (a, 0) that reproduces the network's own decisions."""
    return LinearProbe(embedded_regressor(spec, w), 0.0)


# -------------------------------------------------------------------- PCA

def pca_project(features, dims: int = 2):
    """Project centered rows onto the top principal directions.

    Returns ``(coords, variances)``. Each direction is signed so that its
    largest-magnitude entry is positive.
    """
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ValueError("pca_project needs at least two rows")
    if not 1 <= dims <= F.shape[1]:
        raise ValueError(f"dims must be in [1, {F.shape[1]}]")
    C = F - F.mean(axis=0)
    _, s, Vt = np.linalg.svd(C, full_matrices=False)
    V = Vt[:dims]
    pivot = np.argmax(np.abs(V), axis=1)
    V = V * np.sign(V[np.arange(dims), pivot])[:, None]
    var = s[:dims] ** 2 / (F.shape[0] - 1)
    return C @ V.T, var


# ------------------------------------------------------ decision boundary

def decision_radius(spec: ModelSpec, w, n: int = 200, extent: float = 1.25,
                    threshold: float = 0.0) -> float:
    """Mean distance from the origin of the zero level set of a 2-D model.

    The model is evaluated on an n x n grid over [-extent, extent]^2; every
    sign change between horizontally or vertically adjacent nodes gives a
    crossing point by linear interpolation.
    """
    if spec.input_dim != 2 or spec.output_dim != 1:
        raise ValueError("decision_radius needs a 2-D input, scalar-output model")
    t = np.linspace(-extent, extent, n)
    gx, gy = np.meshgrid(t, t, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    f = nn.predict(spec, w, pts)[:, 0].reshape(n, n) - threshold
    crossings = []
    for axis in (0, 1):
        a = f.take(np.arange(n - 1), axis=axis)
        b = f.take(np.arange(1, n), axis=axis)
        mask = (a < 0) != (b < 0)
        frac = a[mask] / (a[mask] - b[mask])
        ia, ib = np.nonzero(mask)
        if axis == 0:
            x = t[ia] + frac * (t[1] - t[0])
            y = t[ib]
        else:
            x = t[ia]
            y = t[ib] + frac * (t[1] - t[0])
        crossings.append(np.hypot(x, y))
    r = np.concatenate(crossings)
    if r.size == 0:
        return float("nan")
    return float(r.mean())


# ---------------------------------------------------------------- writers

def write_neighbors_csv(report: NeighborReport, file, which: str = "ntk") -> None:
    """``lambda,rank,index,similarity``; the Euclidean file stores -distance."""
    if which == "ntk":
        idxs, scores = report.ntk_indices, report.ntk_similarities
    elif which == "euclidean":
        idxs = report.euclidean_indices
        scores = [-d for d in report.euclidean_distances]
    else:
        raise ValueError(f"unknown ranking {which!r}")
    with Path(file).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "rank", "index", "similarity"])
        for lam, idx, sc in zip(report.lambdas, idxs, scores):
            for rank, (i, s) in enumerate(zip(idx, sc)):
                writer.writerow([f"{lam:.17g}", rank, int(i), f"{s:.17g}"])


def write_probe_csv(results: dict, file) -> None:
    """``split,accuracy`` with one row per probe."""
    with Path(file).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "accuracy"])
        for split, acc in results.items():
            writer.writerow([split, f"{acc:.17g}"])


def write_pca_csv(coords, labels, file) -> None:
    """``index,label,c1,c2``."""
    coords = np.asarray(coords)
    labels = np.ravel(labels)
    with Path(file).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label", "c1", "c2"])
        for i, (c, lab) in enumerate(zip(coords, labels)):
            c2 = c[1] if c.shape[0] > 1 else 0.0
            writer.writerow([i, f"{lab:.17g}", f"{c[0]:.17g}", f"{c2:.17g}"])
