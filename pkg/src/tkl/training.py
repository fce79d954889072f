"""Full-batch gradient descent with a recorded learning path.

The update is ``w(k+1) = w(k) - eta_k * grad L(w(k))`` where the aggregate
loss is ``(1/N) sum_n ||N(x_n; w) - y_n||^2``. The kernel verifier uses the
same :func:`loss_prime`, which is all the decomposition residual depends on.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from tkl import nn
from tkl.data import LabeledDataset
from tkl.nn import ModelSpec, ParamVector

__all__ = [
    "TrainConfig", "LearningPath", "DivergedError", "PathFormatError",
    "loss_value", "loss_prime", "aggregate_loss", "loss_and_grad", "gd_step",
    "train_full_batch", "accuracy", "save_path", "load_path",
]

DIVERGENCE_LIMIT = 1e12
MAGIC = b"NTKPATH1"
VERSION = 1
_HEADER = struct.Struct("<8sIQQQ")
_SNAP_HEAD = struct.Struct("<Qd")


class DivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss!r})")
        self.step = step
        self.loss = loss


class PathFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    lr: float | Sequence[float] = 1e-2
    loss: str = "mse"
    seed: int = 0
    stride: int = 1
    record: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if not np.isscalar(self.lr):
            lr = tuple(float(v) for v in self.lr)
            if len(lr) != self.steps:
                raise ValueError(f"schedule has {len(lr)} rates for {self.steps} steps")
            object.__setattr__(self, "lr", lr)
            rates = lr
        else:
            rates = (float(self.lr),)
        if not all(v > 0 and math.isfinite(v) for v in rates):
            raise ValueError("learning rates must be positive and finite")

    def eta(self, k: int) -> float:
        return float(self.lr) if np.isscalar(self.lr) else self.lr[k]

    def to_dict(self) -> dict:
        d = asdict(self)
        if not np.isscalar(self.lr):
            d["lr"] = list(self.lr)
        return d


@dataclass
class LearningPath:
    """Snapshots (k, eta_k, w(k)); ``etas[i]`` is the rate of the step taken
    from snapshot i (0.0 for the final snapshot w(K))."""
    spec: ModelSpec
    ks: np.ndarray
    etas: np.ndarray
    weights: np.ndarray
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stride: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ks = np.asarray(self.ks, dtype=np.int64)
        self.etas = np.asarray(self.etas, dtype=np.float64)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if len(self.ks) == 0:
            raise ValueError("a learning path needs at least one snapshot")
        if np.any(np.diff(self.ks) <= 0):
            raise ValueError("snapshot steps must be strictly increasing")
        if self.weights.shape != (len(self.ks), self.spec.n_params):
            raise ValueError(f"weights shape {self.weights.shape} does not match "
                             f"{len(self.ks)} snapshots of d={self.spec.n_params}")

    def __len__(self):
        return len(self.ks)

    @property
    def steps(self) -> int:
        return int(self.ks[-1])

    @property
    def final(self) -> np.ndarray:
        return self.weights[-1]

    @property
    def initial(self) -> np.ndarray:
        return self.weights[0]

    def snapshot(self, i: int):
        return int(self.ks[i]), float(self.etas[i]), self.weights[i]

    def weights_at(self, k: int) -> np.ndarray:
        i = np.searchsorted(self.ks, k)
        if i == len(self.ks) or self.ks[i] != k:
            raise KeyError(f"no snapshot for step {k}")
        return self.weights[i]

    def quadrature_weights(self) -> np.ndarray:
        """Weight of each snapshot in a step sum: eta_k times the steps it covers."""
        gaps = np.diff(self.ks)
        return np.concatenate([self.etas[:-1] * gaps, [0.0]])

    def is_contiguous(self) -> bool:
        return bool(np.all(np.diff(self.ks) == 1))


def loss_value(yhat, y) -> float:
    d = np.asarray(yhat, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.sum(d * d))


def loss_prime(yhat, y) -> np.ndarray:
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"prediction shape {yhat.shape} != label shape {y.shape}")
    return 2.0 * (yhat - y)


def _check(spec: ModelSpec, ds: LabeledDataset):
    if ds.n == 0:
        raise ValueError("empty dataset")
    if ds.p != spec.input_dim or ds.q != spec.output_dim:
        raise ValueError(f"dataset is (p={ds.p}, q={ds.q}) but model is "
                         f"(p={spec.input_dim}, q={spec.output_dim})")


def aggregate_loss(spec: ModelSpec, w, ds: LabeledDataset) -> float:
    _check(spec, ds)
    d = nn.predict(spec, w, ds.inputs) - ds.labels
    return float(np.mean(np.sum(d * d, axis=1)))


def loss_and_grad(spec: ModelSpec, w, ds: LabeledDataset):
    """(aggregate loss, its gradient, predictions) at w."""
    _check(spec, ds)
    preds, grad = nn.mse_grad(spec, w, ds.inputs, ds.labels)
    resid = preds - ds.labels
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    return loss, grad, preds


def _data(w):
    return w.data if isinstance(w, ParamVector) else np.asarray(w, dtype=np.float64)


def gd_step(spec: ModelSpec, w, ds: LabeledDataset, eta: float):
    if not eta > 0:
        raise ValueError("eta must be positive")
    _, grad, _ = loss_and_grad(spec, w, ds)
    new = _data(w) - eta * grad
    return ParamVector(new, w.layout) if isinstance(w, ParamVector) else new


def train_full_batch(spec: ModelSpec, w0, ds: LabeledDataset, config: TrainConfig,
                     callback: Callable | None = None) -> LearningPath:
    """Run ``config.steps`` full-batch steps from ``w0``.

    Snapshot k holds the parameters before step k; the last snapshot is w(K).
    ``callback(k, eta_k, w_k)`` runs before each step. With ``record=False``
    only w(0) and w(K) are kept.
    """
    _check(spec, ds)
    w = _data(w0).copy()
    K = config.steps
    ks, etas, weights = [], [], []
    losses = np.empty(K + 1)
    for k in range(K):
        loss, grad, _ = loss_and_grad(spec, w, ds)
        if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergedError(k, loss)
        losses[k] = loss
        eta = config.eta(k)
        if callback is not None:
            callback(k, eta, w)
        if k == 0 or (config.record and k % config.stride == 0):
            ks.append(k)
            etas.append(eta)
            weights.append(w)
        w = w - eta * grad
    final = aggregate_loss(spec, w, ds)
    if not math.isfinite(final) or final > DIVERGENCE_LIMIT:
        raise DivergedError(K, final)
    losses[K] = final
    ks.append(K)
    etas.append(0.0)
    weights.append(w)
    stride = config.stride if config.record else max(K, 1)
    return LearningPath(spec, np.array(ks), np.array(etas), np.array(weights), losses,
                        stride, {"config": config.to_dict(),
                                 "dataset": {"n": ds.n, "p": ds.p, "q": ds.q}})


def accuracy(spec: ModelSpec, w, ds: LabeledDataset) -> float:
    """Fraction of samples whose thresholded prediction equals the label.

    +-1 labels use ``output >= 0 -> +1``; 0/1 labels threshold each
    coordinate at 0.5.
    """
    out = nn.predict(spec, w, ds.inputs)
    if ds.label_kind == "pm1":
        pred = np.where(out >= 0.0, 1.0, -1.0)
    elif ds.label_kind == "binary":
        pred = (out >= 0.5).astype(np.float64)
    else:
        raise ValueError("accuracy needs classification labels")
    return float(np.mean(np.all(pred == ds.labels, axis=1)))


# ---------------------------------------------------------- persistence

def save_path(path: LearningPath, file, manifest: dict | None = None) -> None:
    """Little-endian binary snapshots plus a JSON manifest next to it."""
    file = Path(file)
    d = path.spec.n_params
    with file.open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, d, len(path), path.stride))
        for k, eta, w in zip(path.ks, path.etas, path.weights):
            fh.write(_SNAP_HEAD.pack(int(k), float(eta)))
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
    doc = {"spec": path.spec.to_dict(), "stride": path.stride,
           "loss_curve": [float(v) for v in path.losses]}
    doc.update(path.meta)
    if manifest:
        doc.update(manifest)
    file.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_path(file, spec: ModelSpec | None = None) -> LearningPath:
    file = Path(file)
    manifest = {}
    side = file.with_suffix(".json")
    if side.exists():
        manifest = json.loads(side.read_text())
    if spec is None:
        if "spec" not in manifest:
            raise PathFormatError(f"{file}: no model spec given and no manifest found")
        spec = ModelSpec.from_dict(manifest["spec"])
    raw = file.read_bytes()
    if len(raw) < _HEADER.size:
        raise PathFormatError(f"{file}: truncated header")
    magic, version, d, count, stride = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise PathFormatError(f"{file}: bad magic {magic!r}")
    if version != VERSION:
        raise PathFormatError(f"{file}: unsupported version {version}")
    if d != spec.n_params:
        raise PathFormatError(f"{file}: d={d} but model has {spec.n_params} parameters")
    rec = _SNAP_HEAD.size + 8 * d
    ks = np.empty(count, dtype=np.int64)
    etas = np.empty(count)
    weights = np.empty((count, d))
    pos = _HEADER.size
    for i in range(count):
        if pos + rec > len(raw):
            raise PathFormatError(f"{file}: truncated in snapshot {i}")
        ks[i], etas[i] = _SNAP_HEAD.unpack_from(raw, pos)
        weights[i] = np.frombuffer(raw, dtype="<f8", count=d, offset=pos + _SNAP_HEAD.size)
        pos += rec
    if pos != len(raw):
        raise PathFormatError(f"{file}: {len(raw) - pos} trailing bytes")
    losses = np.asarray(manifest.get("loss_curve", []), dtype=np.float64)
    meta = {k: v for k, v in manifest.items() if k not in ("spec", "stride", "loss_curve")}
    return LearningPath(spec, ks, etas, weights, losses, int(stride), meta)
