"""Acceptance suite: one test per criterion, full scale.

Each test appends a ``criterion N: PASS|FAIL ...`` line that the conftest
hook prints at the end of the run, then asserts.
"""
import time

import numpy as np
import pytest

from tkl import cli, data, kernel, nn, training
from tkl.nn import ModelSpec

from conftest import ACCEPTANCE


def verdict(n, ok, detail):
    ACCEPTANCE.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def timed_run(cfg, out):
    t0 = time.perf_counter()
    status, rep = cli.run(cfg, out)
    return status, rep, time.perf_counter() - t0


@pytest.fixture(scope="module")
def ball_sphere(tmp_path_factory):
    return timed_run(cli.build_config(preset="paper-5.1"), tmp_path_factory.mktemp("bs"))


# ------------------------------------------------------------ criterion 1

def _fd_rel_error(spec, w, x, h=1e-5):
    J = nn.param_jacobian(spec, w, x)
    fd = np.empty_like(J)
    for j in range(spec.n_params):
        e = np.zeros_like(w)
        e[j] = h
        fd[:, j] = (nn.forward(spec, w + e, x) - nn.forward(spec, w - e, x)) / (2 * h)
    return np.linalg.norm(J - fd) / np.linalg.norm(fd)


def _draw(rng, kind):
    if kind == "mlp":
        spec = ModelSpec.mlp(int(rng.integers(1, 6)), int(rng.integers(1, 9)),
                             int(rng.integers(1, 4)))
    else:
        p = int(2 ** rng.integers(1, 5))
        q = int(rng.choice([d for d in (1, 2, 4, 8, 16) if d <= p]))
        spec = ModelSpec.conv1d_parity(p, int(rng.integers(1, 5)), q=q,
                                       extra_conv=bool(rng.integers(0, 2)))
    # nonzero biases keep every coordinate live
    return spec, rng.uniform(-1, 1, spec.n_params), rng.normal(size=spec.input_dim)


def test_criterion_01_gradients_match_finite_differences():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    errs = [_fd_rel_error(*_draw(rng, kind)) for kind in ["mlp"] * 100 + ["conv"] * 100]
    dt = time.perf_counter() - t0
    worst = max(errs)
    verdict(1, worst <= 1e-6 and dt < 30,
            f"200 draws, max rel error {worst:.2e} (<= 1e-6), {dt:.1f}s (< 30s)")


# ------------------------------------------------------------ criterion 2

def test_criterion_02_linear_regression_exact(tmp_path):
    status, rep, dt = timed_run(cli.build_config(preset="linreg"), tmp_path)
    m = rep["metrics"]
    ok = status == 0 and m["max_relative_residual"] <= 1e-9 and dt < 5
    verdict(2, ok, f"max relative residual {m['max_relative_residual']:.2e} (<= 1e-9) "
                   f"over 100 queries, {dt:.1f}s (< 5s)")


# ------------------------------------------------------------ criterion 3

def test_criterion_03_ball_sphere(ball_sphere, tmp_path):
    status, rep, dt = ball_sphere
    accs = [r["train_accuracy"] for r in rep["metrics"]["runs"]]
    full = sum(a == 1.0 for a in accs)
    ci_cfg = cli.build_config(preset="paper-5.1", overrides={"K": 2000})
    _, ci, _ = timed_run(ci_cfg, tmp_path)
    ci_accs = [r["train_accuracy"] for r in ci["metrics"]["runs"]]
    ok = full >= 4 and dt < 600 and min(ci_accs) >= 0.99
    verdict(3, ok, f"{full}/5 seeds at 100% (>= 4), {dt:.0f}s (< 600s); "
                   f"K=2000 min accuracy {min(ci_accs):.4f} (>= 0.99)")


# ------------------------------------------------------------ criterion 4

def test_criterion_04_decision_radius(ball_sphere):
    _, rep, _ = ball_sphere
    radii = [r["decision_radius"] for r in rep["metrics"]["runs"] if r["train_accuracy"] == 1.0]
    ok = bool(radii) and all(0.6 <= r <= 0.9 for r in radii)
    verdict(4, ok, "mean radius per seed " + ", ".join(f"{r:.3f}" for r in radii)
                   + " (in [0.6, 0.9])")


# ------------------------------------------------------------ criterion 5

def test_criterion_05_halfspace(tmp_path):
    _, rep, dt = timed_run(cli.build_config(preset="paper-5.2"), tmp_path)
    accs = [r["train_accuracy"] for r in rep["metrics"]["runs"]]
    good = sum(a >= 0.995 for a in accs)
    verdict(5, good >= 4, f"{good}/5 seeds >= 99.5% (>= 4), min {min(accs):.4f}, {dt:.0f}s")


# ------------------------------------------------------------ criterion 6

def test_criterion_06_feature_space_separable(tmp_path):
    _, rep, _ = timed_run(cli.build_config("probe"), tmp_path)
    m = rep["metrics"]
    acc = m["probe_accuracy"]
    ok = (m["train_accuracy"] == 1.0 and acc["features"] == 1.0 and acc["raw"] < 1.0
          and m["embedded_identity_max_error"] <= 1e-10)
    verdict(6, ok, f"net {m['train_accuracy']:.4f}, feature probe {acc['features']:.4f} (= 1), "
                   f"raw probe {acc['raw']:.4f} (< 1), embedded identity "
                   f"{m['embedded_identity_max_error']:.1e} (<= 1e-10)")


# ------------------------------------------------------------ criterion 7

def test_criterion_07_residual_decays_with_eta(tmp_path):
    _, rep, _ = timed_run(cli.build_config("decomposition-sweep"), tmp_path)
    rows = sorted(rep["metrics"]["rows"], key=lambda r: -r["eta"])
    means = [r["mean_residual"] for r in rows]
    ok = all(a > b for a, b in zip(means, means[1:]))
    verdict(7, ok, "K=500 mean residual " + " > ".join(f"{v:.2e}" for v in means)
                   + " for eta 1e-1, 1e-2, 1e-3")


# ------------------------------------------------------------ criterion 8

def test_criterion_08_streaming_equals_replay():
    spec = ModelSpec.mlp(2, 10)
    ds = data.gen_ball_sphere(1024, 0)
    Q = np.random.default_rng(8).uniform(-1.25, 1.25, (50, 2))
    acc = kernel.StreamingAccumulator(spec, Q)
    conf = training.TrainConfig(500, 1e-2, record=True)
    path = training.train_full_batch(spec, nn.init_params(spec, 0), ds, conf,
                                     callback=acc.callback(ds))
    streamed = acc.finalize(path.final)
    replayed = kernel.decompose(path, ds, Q)
    diff = max(float(np.max(np.abs(s.rhs - r.rhs))) for s, r in zip(streamed, replayed))
    verdict(8, diff <= 1e-10, f"max |streaming - replay| {diff:.1e} (<= 1e-10), K=500")


# ------------------------------------------------------------ criterion 9

def test_criterion_09_parity_construction(tmp_path):
    t0 = time.perf_counter()
    _, small, _ = timed_run(cli.build_config("parity-verify", overrides={"p": 8}), tmp_path / "a")
    big_cfg = cli.build_config("parity-verify", overrides={"p": 128, "samples": 10000})
    _, big, _ = timed_run(big_cfg, tmp_path / "b")
    dt = time.perf_counter() - t0
    a, b = small["metrics"], big["metrics"]
    ok = (a["max_abs_error"] == 0.0 and a["inputs"] == 256
          and b["max_abs_error"] == 0.0 and b["inputs"] == 10000 and dt < 60)
    verdict(9, ok, f"p=8 error {a['max_abs_error']} on {a['inputs']} inputs, p=128 error "
                   f"{b['max_abs_error']} on {b['inputs']} inputs, {dt:.1f}s (< 60s)")


# ----------------------------------------------------------- criterion 10

def test_criterion_10_perturbed_init_converges(tmp_path):
    cfg = cli.build_config("parity-train", overrides={"seeds": [0, 1, 2, 3, 4], "min_pass": 3})
    _, rep, dt = timed_run(cfg, tmp_path)
    mses = [r["train_mse"] for r in rep["metrics"]["runs"]]
    good = sum(m <= 1e-6 for m in mses)
    verdict(10, good >= 3, f"{good}/5 seeds with train MSE <= 1e-6 (>= 3), "
                           f"max {max(mses):.1e}, {dt:.0f}s")


# ----------------------------------------------------------- criterion 11

def test_criterion_11_two_peak(tmp_path):
    _, rep, dt = timed_run(cli.build_config(preset="paper-6.4"), tmp_path)
    runs = rep["metrics"]["runs"]
    good = sum(r["exhaustive_accuracy"] == 1.0 for r in runs)
    ok = good >= 3 and dt < 1200
    verdict(11, ok, f"{good}/5 seeds at 100% over all 2016 inputs (>= 3), {dt:.0f}s (< 1200s)")


# ----------------------------------------------------------- criterion 12

def test_criterion_12_multi_output_residual_halves():
    spec = ModelSpec.conv1d_parity(8, 2, q=4)
    pairs = []
    for seed in range(5):
        ds = data.gen_xl_dataset(8, 4, 64, seed, outputs=4)
        Q = np.random.default_rng(seed + 1).integers(0, 2, (20, 8)).astype(float)
        w0 = nn.init_params(spec, seed).data
        rows = kernel.decomposition_residual_sweep(
            [kernel.SweepRun(spec, ds, w0, eta, 100, Q) for eta in (1e-3, 5e-4)])
        pairs.append((rows[0]["mean_residual"], rows[1]["mean_residual"]))
    ok = all(a > b for a, b in pairs)
    verdict(12, ok, "q=4 conv, K=100, residual eta=1e-3 -> 5e-4 per seed: "
                    + ", ".join(f"{a:.1e}->{b:.1e}" for a, b in pairs))


# ----------------------------------------------------------- criterion 13

def test_criterion_13_kernel_algebra():
    rng = np.random.default_rng(13)
    sym, psd, diag = True, [], True
    for spec in (ModelSpec.mlp(2, 10), ModelSpec.conv1d_parity(8, 2, q=1)):
        w = nn.init_params(spec, 0)
        X = rng.normal(size=(64, spec.input_dim))
        for i in range(0, 64, 2):
            sym &= (kernel.tangent_kernel(spec, w, X[i], X[i + 1])
                    == kernel.tangent_kernel(spec, w, X[i + 1], X[i]))
            diag &= kernel.normalized_ntk(spec, w, X[i], X[i]) == 1.0
        ev = kernel.gram_matrix(spec, w, X).eigenvalues()
        psd.append(ev.min() / ev.max())
    # multi-output: the q x q block transposes under swapping arguments
    spec = ModelSpec.conv1d_parity(8, 2, q=4)
    w = nn.init_params(spec, 0)
    X = rng.normal(size=(64, 8))
    for i in range(0, 64, 2):
        sym &= np.array_equal(kernel.tangent_kernel_matrix(spec, w, X[i], X[i + 1]),
                              kernel.tangent_kernel_matrix(spec, w, X[i + 1], X[i]).T)
    ev = kernel.gram_matrix(spec, w, X).eigenvalues()
    psd.append(ev.min() / ev.max())
    ok = sym and diag and all(r >= -1e-8 for r in psd)
    verdict(13, ok, f"symmetry bit-exact {sym}, normalized diagonal == 1 {diag}, "
                    f"Gram min/max eig {min(psd):.1e} (>= -1e-8) at 64 points")
