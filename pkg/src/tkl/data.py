"""Dataset generators, the prefix-parity oracle and the hand-built parity network."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tkl.nn import ModelSpec, ParamVector

__all__ = [
    "LabeledDataset", "TwoPeakIndex", "gen_ball_sphere", "gen_halfspace",
    "cumsum_mod2", "gen_xl_dataset", "enumerate_two_peak", "two_peak_subset",
    "build_parity_network", "perturb_params", "save_dataset", "load_dataset",
]

LABEL_KINDS = ("pm1", "binary", "real")


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    label_kind: str = "real"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.ascontiguousarray(self.inputs, dtype=np.float64)
        Y = np.asarray(self.labels, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        Y = np.ascontiguousarray(Y)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError(f"inputs must be a non-empty (N, p) array, got {X.shape}")
        if Y.shape[0] != X.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {Y.shape[0]} labels")
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"unknown label kind {self.label_kind!r}")
        if self.label_kind == "pm1" and not np.all(np.abs(Y) == 1):
            raise ValueError("pm1 labels must be -1 or +1")
        if self.label_kind == "binary" and not np.all((Y == 0) | (Y == 1)):
            raise ValueError("binary labels must be 0 or 1")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", Y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def p(self) -> int:
        return self.inputs.shape[1]

    @property
    def q(self) -> int:
        return self.labels.shape[1]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(self.inputs[index], self.labels[index], self.label_kind,
                              dict(self.meta))


@dataclass(frozen=True, order=True)
class TwoPeakIndex:
    """1-based positions of the two ones, psi1 < psi2."""
    psi1: int
    psi2: int

    def encode(self, p: int) -> np.ndarray:
        if not 1 <= self.psi1 < self.psi2 <= p:
            raise ValueError(f"need 1 <= psi1 < psi2 <= {p}, got {self}")
        x = np.zeros(p)
        x[[self.psi1 - 1, self.psi2 - 1]] = 1.0
        return x

    def label(self, p: int) -> int:
        return int(self.psi1 <= p // 2 <= self.psi2)


def gen_ball_sphere(N: int = 1024, seed: int = 0) -> LabeledDataset:
    """N/2 points on the unit circle (+1) and N/2 in the radius-0.5 disk (-1)."""
    if N < 2 or N % 2:
        raise ValueError(f"N must be even and positive, got {N}")
    rng = np.random.default_rng(seed)
    h = N // 2
    theta = rng.uniform(0.0, 2.0 * np.pi, h)
    pos = np.column_stack([np.cos(theta), np.sin(theta)])
    radius = 0.5 * np.sqrt(rng.uniform(0.0, 1.0, h))
    phi = rng.uniform(0.0, 2.0 * np.pi, h)
    neg = radius[:, None] * np.column_stack([np.cos(phi), np.sin(phi)])
    X = np.vstack([pos, neg])
    y = np.concatenate([np.ones(h), -np.ones(h)])
    return LabeledDataset(X, y, "pm1", {"kind": "ball-sphere", "N": N, "seed": seed})


def gen_halfspace(N: int = 1024, seed: int = 0) -> LabeledDataset:
    """Uniform points in [-1, 1]^2 labelled by the side of a random line through 0."""
    if N < 1:
        raise ValueError("N must be positive")
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    a = np.array([np.cos(angle), np.sin(angle)])
    X = rng.uniform(-1.0, 1.0, (N, 2))
    y = np.where(X @ a >= 0.0, 1.0, -1.0)
    return LabeledDataset(X, y, "pm1",
                          {"kind": "halfspace", "N": N, "seed": seed, "a": a.tolist()})


def cumsum_mod2(x) -> np.ndarray:
    """Prefix parity: y_j = (x_1 + ... + x_j) mod 2.

    Works on a single vector or row-wise on a 2-D array.
    """
    x = np.asarray(x)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("cumsum_mod2 expects entries in {0, 1}")
    return np.cumsum(x.astype(np.int64), axis=-1) % 2


def _sample_supports(p, l, N, rng):
    total = math.comb(p, l)
    if N > total // 2:
        # dense regime: enumerate then pick
        combos = list(itertools.combinations(range(p), l))
        pick = rng.choice(total, N, replace=False)
        return [combos[i] for i in sorted(pick)]
    seen = set()
    out = []
    while len(out) < N:
        support = tuple(sorted(rng.choice(p, l, replace=False).tolist()))
        if support not in seen:
            seen.add(support)
            out.append(support)
    return out


def gen_xl_dataset(p: int, l: int, N: int, seed: int = 0,
                   outputs: int | None = None) -> LabeledDataset:
    """N distinct binary vectors with exactly l ones, labelled by prefix parity.

    ``outputs`` keeps only the parity at evenly spaced prefix lengths
    ``p/q, 2p/q, ..., p`` (matching a conv model with ``q`` outputs).
    """
    if l <= 0 or l > p or l % 2:
        raise ValueError(f"need an even l in (0, {p}], got {l}")
    total = math.comb(p, l)
    if N > total:
        raise ValueError(f"N={N} exceeds |X_l| = C({p}, {l}) = {total}")
    rng = np.random.default_rng(seed)
    X = np.zeros((N, p))
    for n, support in enumerate(_sample_supports(p, l, N, rng)):
        X[n, list(support)] = 1.0
    Y = cumsum_mod2(X).astype(np.float64)
    q = p if outputs is None else outputs
    if p % q:
        raise ValueError("outputs must divide p")
    Y = Y[:, [p // q * (m + 1) - 1 for m in range(q)]]
    return LabeledDataset(X, Y, "binary",
                          {"kind": "xl", "p": p, "l": l, "N": N, "seed": seed, "q": q})


def enumerate_two_peak(p: int = 64) -> LabeledDataset:
    """All C(p, 2) two-hot vectors in lexicographic (psi1, psi2) order."""
    if p < 2 or p % 2:
        raise ValueError("p must be even")
    pairs = [TwoPeakIndex(a, b) for a, b in itertools.combinations(range(1, p + 1), 2)]
    X = np.stack([t.encode(p) for t in pairs])
    y = np.array([t.label(p) for t in pairs], dtype=np.float64)
    return LabeledDataset(X, y, "binary", {"kind": "two-peak", "p": p})


def two_peak_subset(p: int = 64, N: int = 1024, seed: int = 0):
    """Seeded uniform training subset of the two-peak inputs, plus the full set."""
    full = enumerate_two_peak(p)
    if N > full.n:
        raise ValueError(f"N={N} exceeds {full.n} two-peak inputs")
    idx = np.sort(np.random.default_rng(seed).choice(full.n, N, replace=False))
    train = full.subset(idx)
    train.meta.update({"N": N, "seed": seed})
    return train, full


def build_parity_network(p: int, r: int = 2, extra_conv: bool = False,
                         q: int | None = None):
    """Hand-set weights realizing prefix parity exactly.

    Every block computes xor of adjacent pairs via
    ``u xor v = relu(u - v) + relu(v - u)`` on channels 0 and 1; the other
    channels are zero.
    """
    if r < 2:
        raise ValueError("the pairwise xor needs r >= 2")
    spec = ModelSpec.conv1d_parity(p, r, q=q, extra_conv=extra_conv)
    w = np.zeros(spec.n_params)
    vec = ParamVector(w, spec.layout())
    for b in range(spec.n_blocks):
        vec.segment(f"block{b}.conv1.weight")[:2] = [[1.0, -1.0], [-1.0, 1.0]]
        vec.segment(f"block{b}.conv2.weight")[:2] = 1.0
        if extra_conv:
            vec.segment(f"block{b}.mix.weight")[:] = np.eye(r)
    return spec, vec


def perturb_params(w, sigma: float, seed: int = 0) -> ParamVector | np.ndarray:
    """w + sigma * N(0, 1) noise, coordinate-wise."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    data = w.data if isinstance(w, ParamVector) else np.asarray(w, dtype=np.float64)
    noisy = data + sigma * np.random.default_rng(seed).standard_normal(data.shape)
    if isinstance(w, ParamVector):
        return ParamVector(noisy, w.layout)
    return noisy


def save_dataset(ds: LabeledDataset, path) -> None:
    """CSV ``x_0..x_{p-1},y_0..y_{q-1}`` plus a ``.json`` metadata sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{i}" for i in range(ds.p)] + [f"y_{i}" for i in range(ds.q)])
        for x, y in zip(ds.inputs, ds.labels):
            writer.writerow([f"{v:.17g}" for v in x] + [f"{v:.17g}" for v in y])
    meta = {"label_kind": ds.label_kind, "p": ds.p, "q": ds.q, "N": ds.n, "meta": ds.meta}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    p = meta["p"]
    return LabeledDataset(rows[:, :p], rows[:, p:], meta["label_kind"], meta["meta"])
