"""Small differentiable models over a flat float64 parameter vector.

Three model kinds are supported:

``mlp``
    ``W1 . GELU(W2 . GELU(W3 . x + b3) + b2) + b1`` with hidden width ``r``.
``conv1d-parity``
    ``log2(p)`` blocks of conv(kernel 2, 1 -> r) -> ReLU -> conv(kernel 1,
    r -> 1) -> keep even positions. Each output ``m`` is the block stack
    applied to the left-zero-padded prefix of ``x`` of length ``k_m``.
``linear``
    ``A . x`` without bias; the exactly solvable control model.

All gradients are exact reverse-mode derivatives computed by the active
kernel backend (see :mod:`tkl._backend`).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from tkl import _backend
from tkl._pykernels import gelu, gelu_prime

__all__ = [
    "ModelSpec", "Segment", "ParamVector", "FeatureVector", "ShapeError",
    "init_params", "gelu", "gelu_prime", "forward", "predict",
    "param_gradient", "param_jacobian", "batch_jacobian", "vjp", "mse_grad",
]

KINDS = ("mlp", "conv1d-parity", "linear")

# rows of prefix copies materialized at once for the conv model
_CONV_CHUNK = 1 << 22


class ShapeError(ValueError):
    """Input or parameter dimensions do not match the model."""


class Segment(NamedTuple):
    name: str
    offset: int
    shape: tuple
    fan_in: int  # 0 marks a bias segment

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    output_dim: int = 1
    hidden_width: int = 0
    activation: str = "gelu"
    extra_conv: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if self.kind == "mlp":
            if self.hidden_width < 1:
                raise ValueError("mlp needs hidden_width >= 1")
            if self.activation != "gelu":
                raise ValueError("mlp uses the GELU activation")
        elif self.kind == "conv1d-parity":
            p = self.input_dim
            if p < 2 or p & (p - 1):
                raise ValueError(f"conv1d-parity needs p a power of two, got {p}")
            if self.hidden_width < 1:
                raise ValueError("conv1d-parity needs hidden_width >= 1")
            if self.activation != "relu":
                raise ValueError("conv1d-parity uses the ReLU activation")
            if p % self.output_dim:
                raise ValueError("output_dim must divide input_dim for conv1d-parity")

    @classmethod
    def mlp(cls, p: int, r: int, q: int = 1) -> "ModelSpec":
        return cls("mlp", p, q, r, "gelu")

    @classmethod
    def conv1d_parity(cls, p: int, r: int, q: int | None = None,
                      extra_conv: bool = False) -> "ModelSpec":
        return cls("conv1d-parity", p, p if q is None else q, r, "relu", extra_conv)

    @classmethod
    def linear(cls, p: int, q: int = 1) -> "ModelSpec":
        return cls("linear", p, q, 0, "none")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def n_blocks(self) -> int:
        if self.kind != "conv1d-parity":
            return 0
        return self.input_dim.bit_length() - 1

    @property
    def prefix_lengths(self) -> tuple:
        """Prefix length fed to each output of the conv model."""
        step = self.input_dim // self.output_dim
        return tuple(step * (m + 1) for m in range(self.output_dim))

    def layers(self) -> list[tuple]:
        p, q, r = self.input_dim, self.output_dim, self.hidden_width
        if self.kind == "linear":
            return [("affine", p, q)]
        if self.kind == "mlp":
            return [("affine", p, r), ("gelu",), ("affine", r, r), ("gelu",),
                    ("affine", r, q)]
        out = []
        for _ in range(self.n_blocks):
            out += [("conv", 2, 1, r), ("relu",)]
            if self.extra_conv:
                out += [("conv", 1, r, r), ("relu",)]
            out += [("conv", 1, r, 1), ("downsample", 2)]
        return out

    def layout(self) -> tuple:
        p, q, r = self.input_dim, self.output_dim, self.hidden_width
        if self.kind == "linear":
            entries = [("A", (q, p), p)]
        elif self.kind == "mlp":
            entries = [("W1", (q, r), r), ("W2", (r, r), r), ("W3", (r, p), p),
                       ("b1", (q,), 0), ("b2", (r,), 0), ("b3", (r,), 0)]
        else:
            entries = []
            for b in range(self.n_blocks):
                entries += [(f"block{b}.conv1.weight", (r, 2), 2),
                            (f"block{b}.conv1.bias", (r,), 0)]
                if self.extra_conv:
                    entries += [(f"block{b}.mix.weight", (r, r), r),
                                (f"block{b}.mix.bias", (r,), 0)]
                entries += [(f"block{b}.conv2.weight", (r,), r),
                            (f"block{b}.conv2.bias", (1,), 0)]
        segments = []
        offset = 0
        for name, shape, fan_in in entries:
            seg = Segment(name, offset, shape, fan_in)
            segments.append(seg)
            offset += seg.size
        return tuple(segments)

    @property
    def n_params(self) -> int:
        last = self.layout()[-1]
        return last.offset + last.size


@dataclass(frozen=True)
class ParamVector:
    data: np.ndarray
    layout: tuple

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        offset = 0
        for seg in self.layout:
            if seg.offset != offset:
                raise ValueError(f"segment {seg.name} breaks the partition at {offset}")
            offset += seg.size
        if offset != data.shape[0] or data.ndim != 1:
            raise ValueError(f"layout covers {offset} entries, data has {data.shape}")

    @classmethod
    def of(cls, spec: ModelSpec, data) -> "ParamVector":
        return cls(np.array(data, dtype=np.float64), spec.layout())

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.data[seg.offset:seg.offset + seg.size].reshape(seg.shape)
        raise KeyError(name)

    def __len__(self):
        return self.data.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True)
class FeatureVector:
    """phi(x) = grad_w N(x; w(k)) for one input at snapshot ``k``."""
    data: np.ndarray
    snapshot_index: int


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    layout = spec.layout()
    data = np.zeros(spec.n_params)
    for seg in layout:
        if seg.fan_in:
            bound = 1.0 / math.sqrt(seg.fan_in)
            data[seg.offset:seg.offset + seg.size] = rng.uniform(-bound, bound, seg.size)
    return ParamVector(data, layout)


def _weights(spec, w) -> np.ndarray:
    data = w.data if isinstance(w, ParamVector) else np.ascontiguousarray(w, dtype=np.float64)
    if data.shape != (spec.n_params,):
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {data.shape}")
    return data


def _inputs(spec, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"expected inputs of shape (N, {spec.input_dim}), got {X.shape}")
    return X


def _single(spec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise ShapeError(f"expected input of shape ({spec.input_dim},), got {x.shape}")
    return x[None, :]


def _conv_kernels(spec):
    # the compiled core has no extra-conv variant
    return _backend.BACKENDS["python"] if spec.extra_conv else _backend.kernels()


def _prefix_copies(spec, X):
    """(N, q, p) array whose row (n, m) is x_n's prefix of length k_m, left-padded."""
    N, p = X.shape
    copies = np.zeros((N, spec.output_dim, p))
    for m, k in enumerate(spec.prefix_lengths):
        copies[:, m, p - k:] = X[:, :k]
    return copies


def _conv_chunks(spec, N):
    rows = max(1, _CONV_CHUNK // (spec.output_dim * spec.input_dim))
    for start in range(0, N, rows):
        yield slice(start, min(N, start + rows))


def predict(spec: ModelSpec, w, X) -> np.ndarray:
    """Outputs for a batch of inputs, shape (N, q)."""
    w = _weights(spec, w)
    X = _inputs(spec, X)
    p, q, r = spec.input_dim, spec.output_dim, spec.hidden_width
    if spec.kind == "linear":
        return X @ w.reshape(q, p).T
    if spec.kind == "mlp":
        return _backend.kernels().mlp_forward(w, X, p, r, q)
    k = _conv_kernels(spec)
    out = np.empty((X.shape[0], q))
    for sl in _conv_chunks(spec, X.shape[0]):
        Xc = _prefix_copies(spec, X[sl]).reshape(-1, p)
        out[sl] = k.conv_forward(w, Xc, r, spec.extra_conv).reshape(-1, q)
    return out


def forward(spec: ModelSpec, w, x) -> np.ndarray:
    """N(x; w) for a single input, shape (q,)."""
    return predict(spec, w, _single(spec, x))[0]


def batch_jacobian(spec: ModelSpec, w, X) -> np.ndarray:
    """Per-sample Jacobians of w -> N(x_n; w), shape (N, q, d)."""
    w = _weights(spec, w)
    X = _inputs(spec, X)
    N = X.shape[0]
    p, q, r = spec.input_dim, spec.output_dim, spec.hidden_width
    if spec.kind == "linear":
        J = np.zeros((N, q, q * p))
        for m in range(q):
            J[:, m, m * p:(m + 1) * p] = X
        return J
    if spec.kind == "mlp":
        return _backend.kernels().mlp_jacobian(w, X, p, r, q)
    k = _conv_kernels(spec)
    J = np.empty((N, q, spec.n_params))
    for sl in _conv_chunks(spec, N):
        Xc = _prefix_copies(spec, X[sl]).reshape(-1, p)
        J[sl] = k.conv_jacobian(w, Xc, r, spec.extra_conv).reshape(-1, q, spec.n_params)
    return J


def vjp(spec: ModelSpec, w, X, V) -> np.ndarray:
    """sum_n V[n] @ J(x_n), the d-vector pulled back from output cotangents V (N, q)."""
    w = _weights(spec, w)
    X = _inputs(spec, X)
    V = np.ascontiguousarray(V, dtype=np.float64)
    p, q, r = spec.input_dim, spec.output_dim, spec.hidden_width
    if V.shape != (X.shape[0], q):
        raise ShapeError(f"cotangent shape {V.shape} does not match ({X.shape[0]}, {q})")
    if spec.kind == "linear":
        return (V.T @ X).ravel()
    if spec.kind == "mlp":
        return _backend.kernels().mlp_vjp(w, X, V, p, r, q)
    k = _conv_kernels(spec)
    g = np.zeros(spec.n_params)
    for sl in _conv_chunks(spec, X.shape[0]):
        Xc = _prefix_copies(spec, X[sl]).reshape(-1, p)
        g += k.conv_vjp(w, Xc, V[sl].ravel(), r, spec.extra_conv)
    return g


def mse_grad(spec: ModelSpec, w, X, Y):
    """Predictions and the gradient of (1/N) sum_n ||N(x_n; w) - y_n||^2.

    One fused forward/backward pass; equal to ``vjp(spec, w, X, 2 (P - Y) / N)``.
    """
    w = _weights(spec, w)
    X = _inputs(spec, X)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    N = X.shape[0]
    p, q, r = spec.input_dim, spec.output_dim, spec.hidden_width
    if Y.shape != (N, q):
        raise ShapeError(f"label shape {Y.shape} does not match ({N}, {q})")
    if spec.kind == "linear":
        out = X @ w.reshape(q, p).T
        return out, (2.0 * (out - Y) / N).T.dot(X).ravel()
    if spec.kind == "mlp":
        return _backend.kernels().mlp_mse_grad(w, X, Y, p, r, q)
    k = _conv_kernels(spec)
    out = np.empty((N, q))
    g = np.zeros(spec.n_params)
    for sl in _conv_chunks(spec, N):
        Xc = _prefix_copies(spec, X[sl]).reshape(-1, p)
        o, gc = k.conv_mse_grad(w, Xc, Y[sl].ravel(), N, r, spec.extra_conv)
        out[sl] = o.reshape(-1, q)
        g += gc
    return out, g


def param_jacobian(spec: ModelSpec, w, x) -> np.ndarray:
    """Jacobian of w -> N(x; w), shape (q, d)."""
    return batch_jacobian(spec, w, _single(spec, x))[0]


def param_gradient(spec: ModelSpec, w, x) -> np.ndarray:
    """Feature vector phi(x) = grad_w N(x; w) of a scalar-output model."""
    if spec.output_dim != 1:
        raise ValueError("param_gradient needs a scalar-output model; use param_jacobian")
    return param_jacobian(spec, w, x)[0]
