"""Vectorized numpy implementations of the hot kernels.

This is the reference backend. ``_ckernels`` mirrors every function here
with the same signature; the two are compared in ``tests/test_backends.py``.

Parameter layouts (flat, row-major):

* mlp:   W1 (q, r), W2 (r, r), W3 (r, p), b1 (q), b2 (r), b3 (r)
* conv:  per block, [c1w (r, 2), c1b (r), (ew (r, r), eb (r)), c2w (r), c2b (1)]
         where the bracketed pair only exists with ``extra=True``.
"""

import math

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(s):
    """GELU(s) = s * P(X <= s) for X ~ N(0, 1), exact Gaussian CDF."""
    return s * ndtr(s)


def gelu_prime(s):
    return ndtr(s) + s * np.exp(-0.5 * s * s) * _INV_SQRT_2PI


def _split_mlp(w, p, r, q):
    o = 0
    out = []
    for shape in ((q, r), (r, r), (r, p), (q,), (r,), (r,)):
        size = math.prod(shape)
        out.append(w[o:o + size].reshape(shape))
        o += size
    return out


def _mlp_cache(w, X, p, r, q):
    W1, W2, W3, b1, b2, b3 = _split_mlp(w, p, r, q)
    z3 = X @ W3.T + b3
    c3 = ndtr(z3)
    h1 = z3 * c3
    z2 = h1 @ W2.T + b2
    c2 = ndtr(z2)
    h2 = z2 * c2
    out = h2 @ W1.T + b1
    # GELU' reuses the CDF values from the forward pass
    gp3 = c3 + z3 * np.exp(-0.5 * z3 * z3) * _INV_SQRT_2PI
    gp2 = c2 + z2 * np.exp(-0.5 * z2 * z2) * _INV_SQRT_2PI
    return (W1, W2, W3), (h1, h2, gp3, gp2), out


def mlp_forward(w, X, p, r, q):
    W1, W2, W3, b1, b2, b3 = _split_mlp(w, p, r, q)
    h1 = gelu(X @ W3.T + b3)
    h2 = gelu(h1 @ W2.T + b2)
    return h2 @ W1.T + b1


def _mlp_pullback(W, cache, X, V):
    W1, W2, W3 = W
    h1, h2, gp3, gp2 = cache
    d2 = (V @ W1) * gp2
    d3 = (d2 @ W2) * gp3
    return np.concatenate([
        (V.T @ h2).ravel(),
        (d2.T @ h1).ravel(),
        (d3.T @ X).ravel(),
        V.sum(axis=0),
        d2.sum(axis=0),
        d3.sum(axis=0),
    ])


def mlp_vjp(w, X, V, p, r, q):
    """Sum over samples of V[n] @ J(x_n); V has shape (N, q)."""
    W, cache, _ = _mlp_cache(w, X, p, r, q)
    return _mlp_pullback(W, cache, X, V)


def mlp_mse_grad(w, X, Y, p, r, q):
    """Predictions and the gradient of (1/N) sum_n ||N(x_n) - y_n||^2, one pass."""
    W, cache, out = _mlp_cache(w, X, p, r, q)
    V = 2.0 * (out - Y) / X.shape[0]
    return out, _mlp_pullback(W, cache, X, V)


def mlp_jacobian(w, X, p, r, q):
    """Per-sample Jacobians, shape (N, q, d)."""
    (W1, W2, W3), (h1, h2, gp3, gp2), _ = _mlp_cache(w, X, p, r, q)
    N = X.shape[0]
    eye = np.eye(q)
    d2 = W1[None, :, :] * gp2[:, None, :]                       # (N, q, r)
    d3 = (d2 @ W2) * gp3[:, None, :]                            # (N, q, r)
    blocks = [
        (eye[None, :, :, None] * h2[:, None, None, :]).reshape(N, q, q * r),
        (d2[:, :, :, None] * h1[:, None, None, :]).reshape(N, q, r * r),
        (d3[:, :, :, None] * X[:, None, None, :]).reshape(N, q, r * p),
        np.broadcast_to(eye, (N, q, q)),
        d2,
        d3,
    ]
    return np.concatenate(blocks, axis=2)


# ---------------------------------------------------------------- conv

def _split_conv(w, n_blocks, r, extra):
    blocks = []
    o = 0
    for _ in range(n_blocks):
        c1w = w[o:o + 2 * r].reshape(r, 2); o += 2 * r
        c1b = w[o:o + r]; o += r
        ew = eb = None
        if extra:
            ew = w[o:o + r * r].reshape(r, r); o += r * r
            eb = w[o:o + r]; o += r
        c2w = w[o:o + r]; o += r
        c2b = w[o]; o += 1
        blocks.append((c1w, c1b, ew, eb, c2w, c2b))
    return blocks


def _conv_cache(w, Xc, r, extra):
    n_blocks = int(round(math.log2(Xc.shape[1])))
    blocks = _split_conv(w, n_blocks, r, extra)
    u = Xc
    caches = []
    for c1w, c1b, ew, eb, c2w, c2b in blocks:
        a = u[:, 0::2]
        b = u[:, 1::2]
        z = a[:, :, None] * c1w[:, 0] + b[:, :, None] * c1w[:, 1] + c1b
        h = np.maximum(z, 0.0)
        if extra:
            ze = h @ ew.T + eb
            h2 = np.maximum(ze, 0.0)
        else:
            ze = None
            h2 = h
        u = h2 @ c2w + c2b
        caches.append((a, b, z, h, ze, h2))
    return blocks, caches, u[:, 0]


def conv_forward(w, Xc, r, extra=False):
    """Scalar output of the block stack for each row of ``Xc`` (length 2**B)."""
    return _conv_cache(w, Xc, r, extra)[2]


def _conv_backward(blocks, caches, g, per_sample):
    M = g.shape[0]
    g_t = g.reshape(M, 1)
    # sample axis kept in per-sample mode, contracted otherwise
    ax = "m" if per_sample else ""

    def flat(t):
        return t.reshape(M, -1) if per_sample else t.ravel()

    grads = []
    for (c1w, c1b, ew, eb, c2w, c2b), (a, b, z, h, ze, h2) in zip(
            reversed(blocks), reversed(caches)):
        dc2b = g_t.sum(axis=1) if per_sample else g_t.sum()
        dc2w = np.einsum(f"ml,mlc->{ax}c", g_t, h2)
        g_h = g_t[:, :, None] * c2w
        extra_grads = []
        if ze is not None:
            g_ze = g_h * (ze > 0)
            extra_grads = [flat(np.einsum(f"mli,mlj->{ax}ij", g_ze, h)),
                           np.einsum(f"mli->{ax}i", g_ze)]
            g_h = g_ze @ ew
        g_z = g_h * (z > 0)
        dc1w = np.stack([np.einsum(f"ml,mlc->{ax}c", a, g_z),
                         np.einsum(f"ml,mlc->{ax}c", b, g_z)], axis=-1)
        dc1b = np.einsum(f"mlc->{ax}c", g_z)
        grads.append([flat(dc1w), dc1b, *extra_grads, dc2w, flat(np.asarray(dc2b))])
        g_u = np.empty((M, 2 * g_z.shape[1]))
        g_u[:, 0::2] = g_z @ c1w[:, 0]
        g_u[:, 1::2] = g_z @ c1w[:, 1]
        g_t = g_u
    axis = 1 if per_sample else 0
    return np.concatenate([np.concatenate(parts, axis=axis) for parts in reversed(grads)],
                          axis=axis)


def conv_vjp(w, Xc, v, r, extra=False):
    """Sum over rows of v[m] * grad_w f(Xc[m])."""
    blocks, caches, _ = _conv_cache(w, Xc, r, extra)
    return _conv_backward(blocks, caches, np.asarray(v, dtype=np.float64), per_sample=False)


def conv_jacobian(w, Xc, r, extra=False):
    """Per-row parameter gradients of the block stack, shape (M, d)."""
    blocks, caches, _ = _conv_cache(w, Xc, r, extra)
    return _conv_backward(blocks, caches, np.ones(Xc.shape[0]), per_sample=True)


def conv_mse_grad(w, Xc, y, n_samples, r, extra=False):
    """Conv analogue of :func:`mlp_mse_grad` over flattened prefix copies.

    ``y`` holds one target per row of ``Xc``; the loss is normalized by
    ``n_samples`` (rows per sample = q).
    """
    blocks, caches, out = _conv_cache(w, Xc, r, extra)
    v = 2.0 * (out - y) / n_samples
    return out, _conv_backward(blocks, caches, v, per_sample=False)
