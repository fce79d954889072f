"""Experiment runner.

Usage
-----
  tkl run ball-sphere --K 2000 --out runs/bs
  tkl train --preset paper-5.1 --out runs/p51 --check
  tkl verify --preset linreg --out runs/lin
  tkl sweep --out runs/sweep
  tkl neighbors --K 2000 --out runs/nb
  tkl probe --K 2000 --out runs/probe
  tkl pca --out runs/pca
  tkl parity --p 128 --out runs/parity
  tkl parity --train --out runs/parity-train

Every run writes ``report.json`` (sorted keys, no timestamps) plus
kind-specific CSVs into ``--out``; timings go to ``run.log``. Exit status is
0 on success, 2 on divergence, 3 when ``--check`` is given and a check fails,
1 on configuration errors.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from tkl import _backend, analysis, data, kernel, nn, training
from tkl.training import DivergedError, load_path, save_path  # noqa: F401  (re-exported)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("tkl")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3

KINDS = ("ball-sphere", "halfspace", "two-peak", "parity-train", "parity-verify",
         "linreg-exact", "decomposition-sweep", "neighbors", "probe", "pca")

# per-kind defaults; presets and config files override them
DEFAULTS = {
    "ball-sphere": {"N": 1024, "r": 10, "eta": 1e-2, "K": 10000, "target": 1.0},
    "halfspace": {"N": 1024, "r": 10, "eta": 1e-2, "K": 10000, "target": 0.995},
    "two-peak": {"p": 64, "N": 1024, "r": 10, "eta": 1e-1, "K": 10000, "target": 1.0},
    "parity-train": {"p": 16, "r": 2, "l": 4, "N": 500, "eta": 1e-2, "K": 1000,
                     "init": "perturbed", "sigma": 0.05, "target_mse": 1e-6},
    "parity-verify": {"p": 8, "r": 2, "samples": 10000, "extra_conv": False},
    "linreg-exact": {"p": 5, "N": 50, "eta": 1e-2, "K": 1000, "queries": 100,
                     "record": "snapshots", "tol": 1e-9},
    "decomposition-sweep": {"model": "mlp", "N": 1024, "r": 10, "K": 500,
                            "etas": [1e-1, 1e-2, 1e-3], "grid": 10},
    "neighbors": {"N": 1024, "r": 10, "eta": 1e-2, "K": 10000, "k": 100,
                  "lambdas": list(analysis.DEFAULT_LAMBDAS)},
    "probe": {"N": 1024, "r": 10, "eta": 1e-2, "K": 10000, "queries": 100},
    "pca": {"dataset": "two-peak", "p": 64, "N": 1024, "r": 10, "eta": 1e-1, "K": 10000},
}

PRESETS = {
    "paper-5.1": {"kind": "ball-sphere", "N": 1024, "r": 10, "eta": 1e-2, "K": 10000,
                  "seeds": [0, 1, 2, 3, 4], "min_pass": 4},
    "paper-5.2": {"kind": "halfspace", "N": 1024, "r": 10, "eta": 1e-2, "K": 10000,
                  "seeds": [0, 1, 2, 3, 4], "min_pass": 4, "target": 0.995},
    "paper-6.4": {"kind": "two-peak", "p": 64, "N": 1024, "r": 10, "eta": 1e-1,
                  "K": 10000, "seeds": [0, 1, 2, 3, 4], "min_pass": 3},
    "linreg": {"kind": "linreg-exact", "p": 5, "N": 50, "eta": 1e-2, "K": 1000,
               "queries": 100},
}

SUBCOMMAND_KIND = {"train": "ball-sphere", "verify": "linreg-exact",
                   "sweep": "decomposition-sweep", "neighbors": "neighbors",
                   "probe": "probe", "pca": "pca", "parity": "parity-verify"}


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------- helpers

def _f(v) -> str:
    return f"{v:.17g}"


def _write_csv(file, header, rows):
    with Path(file).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_f(v) if isinstance(v, float) else v for v in row])


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _seeds(cfg):
    return [int(s) for s in cfg.get("seeds", [cfg.get("seed", 0)])]


def _train(cfg, spec, w0, ds, seed, out, record=False, stride=None, callback=None):
    """Train one run, optionally persisting its path."""
    K = int(cfg["K"])
    keep = record or cfg.get("save_path", False)
    conf = training.TrainConfig(K, float(cfg["eta"]), seed=seed,
                                stride=stride or 1, record=keep or stride is not None)
    t0 = time.perf_counter()
    path = training.train_full_batch(spec, w0, ds, conf, callback=callback)
    log.info("seed %d: %d steps in %.2fs", seed, K, time.perf_counter() - t0)
    if cfg.get("save_path", False):
        name = "path.bin" if len(_seeds(cfg)) == 1 else f"path_seed{seed}.bin"
        save_path(path, out / name, {"seed": seed, "kind": cfg["kind"]})
    return path


def _seed_gate(values, ok, cfg):
    need = int(cfg.get("min_pass", len(values)))
    passed = sum(bool(v) for v in ok)
    return {"passed": passed, "required": need, "ok": passed >= need}


# ------------------------------------------------------------ experiments

def _classification(cfg, out, make):
    """Shared driver for the 2-D and two-peak classification runs."""
    rows, per_seed, ok, radii = [], [], [], []
    for seed in _seeds(cfg):
        train, full = make(seed)
        spec = nn.ModelSpec.mlp(train.p, int(cfg["r"]))
        path = _train(cfg, spec, nn.init_params(spec, seed), train, seed, out)
        acc = training.accuracy(spec, path.final, train)
        entry = {"seed": seed, "final_loss": float(path.losses[-1]), "train_accuracy": acc}
        score = acc
        if full is not None:
            entry["exhaustive_accuracy"] = training.accuracy(spec, path.final, full)
            score = entry["exhaustive_accuracy"]
        if cfg["kind"] == "ball-sphere":
            entry["decision_radius"] = analysis.decision_radius(spec, path.final)
            radii.append((score >= cfg["target"], entry["decision_radius"]))
        per_seed.append(entry)
        ok.append(score >= cfg["target"])
        rows.append([entry[k] for k in sorted(entry)])
    _write_csv(out / "runs.csv", sorted(per_seed[0]), rows)
    checks = {"accuracy": _seed_gate(per_seed, ok, cfg)}
    if radii:
        good = [r for hit, r in radii if hit]
        checks["decision_radius"] = {"range": [0.6, 0.9],
                                     "ok": bool(good) and all(0.6 <= r <= 0.9 for r in good)}
    return {"runs": per_seed}, checks


def run_ball_sphere(cfg, out):
    return _classification(cfg, out, lambda s: (data.gen_ball_sphere(int(cfg["N"]), s), None))


def run_halfspace(cfg, out):
    return _classification(cfg, out, lambda s: (data.gen_halfspace(int(cfg["N"]), s), None))


def run_two_peak(cfg, out):
    return _classification(cfg, out,
                           lambda s: data.two_peak_subset(int(cfg["p"]), int(cfg["N"]), s))


def run_parity_verify(cfg, out):
    p, r = int(cfg["p"]), int(cfg["r"])
    spec, w = data.build_parity_network(p, r, extra_conv=bool(cfg.get("extra_conv", False)))
    if p <= 16:
        X = ((np.arange(2 ** p)[:, None] >> np.arange(p)) & 1).astype(np.float64)
        mode = "exhaustive"
    else:
        rng = np.random.default_rng(int(cfg.get("seed", 0)))
        X = rng.integers(0, 2, (int(cfg["samples"]), p)).astype(np.float64)
        mode = "random"
    err = np.abs(nn.predict(spec, w, X) - data.cumsum_mod2(X))
    max_err = float(err.max())
    _write_csv(out / "parity.csv", ["p", "r", "inputs", "mode", "max_abs_error"],
               [[p, r, X.shape[0], mode, max_err]])
    metrics = {"inputs": X.shape[0], "mode": mode, "max_abs_error": max_err,
               "exact_match": max_err == 0.0, "n_params": spec.n_params}
    return metrics, {"exact_match": {"ok": max_err == 0.0}}


def _cross_l_errors(spec, w, cfg, seed):
    p = int(cfg["p"])
    rows = []
    for l in range(2, p + 1, 2):
        if l == int(cfg["l"]):
            continue
        n = min(int(cfg.get("cross_samples", 500)), math.comb(p, l))
        ds = data.gen_xl_dataset(p, l, n, seed + 1000 + l)
        mse = float(np.mean((nn.predict(spec, w, ds.inputs) - ds.labels) ** 2))
        rows.append((l, mse, float(np.mean(ds.labels ** 2))))
    return rows


def run_parity_train(cfg, out):
    p, r, l, N = int(cfg["p"]), int(cfg["r"]), int(cfg["l"]), int(cfg["N"])
    perturbed = cfg["init"] == "perturbed"
    if cfg["init"] not in ("perturbed", "random"):
        raise ConfigError("init must be 'perturbed' or 'random'")
    per_seed, ok, rows = [], [], []
    for seed in _seeds(cfg):
        ds = data.gen_xl_dataset(p, l, N, seed)
        if perturbed:
            spec, wstar = data.build_parity_network(p, r)
            w0 = data.perturb_params(wstar, float(cfg["sigma"]), seed)
        else:
            spec = nn.ModelSpec.conv1d_parity(p, r)
            w0 = nn.init_params(spec, seed)
        path = _train(cfg, spec, w0, ds, seed, out)
        # mean over all N * q label entries
        mse = float(path.losses[-1]) / spec.output_dim
        entry = {"seed": seed, "train_mse": mse,
                 "train_accuracy": training.accuracy(spec, path.final, ds)}
        cross = _cross_l_errors(spec, path.final, cfg, seed)
        entry["cross_l_mse"] = float(np.mean([c[1] for c in cross])) if cross else float("nan")
        entry["cross_l_zero_baseline"] = (float(np.mean([c[2] for c in cross]))
                                          if cross else float("nan"))
        entry["cross_l_below_baseline"] = bool(entry["cross_l_mse"] < entry["cross_l_zero_baseline"])
        per_seed.append(entry)
        ok.append(mse <= float(cfg["target_mse"]))
        rows.append([seed, mse, entry["train_accuracy"], entry["cross_l_mse"],
                     entry["cross_l_zero_baseline"]])
    _write_csv(out / "runs.csv", ["seed", "train_mse", "train_accuracy", "cross_l_mse",
                                  "cross_l_zero_baseline"], rows)
    checks = {}
    if perturbed:
        checks["train_mse"] = _seed_gate(per_seed, ok, cfg)
    return {"runs": per_seed, "init": cfg["init"]}, checks


def _linreg_dataset(p, N, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, p))
    y = X @ rng.standard_normal(p) + 0.1 * rng.standard_normal(N)
    return data.LabeledDataset(X, y, "real", {"kind": "linreg", "N": N, "p": p, "seed": seed})


def run_linreg_exact(cfg, out):
    p, N, seed = int(cfg["p"]), int(cfg["N"]), _seeds(cfg)[0]
    ds = _linreg_dataset(p, N, seed)
    spec = nn.ModelSpec.linear(p)
    w0 = nn.init_params(spec, seed)
    Q = np.random.default_rng(seed + 1).standard_normal((int(cfg["queries"]), p))
    if cfg["record"] == "streaming":
        acc = kernel.StreamingAccumulator(spec, Q)
        path = _train(cfg, spec, w0, ds, seed, out, callback=acc.callback(ds))
        reports = acc.finalize(path.final)
    elif cfg["record"] == "snapshots":
        path = _train(cfg, spec, w0, ds, seed, out, record=True)
        reports = kernel.decompose(path, ds, Q)
    else:
        raise ConfigError("record must be 'snapshots' or 'streaming'")
    rel = np.array([rep.relative_residual for rep in reports])
    _write_csv(out / "decomposition.csv",
               ["query", "lhs", "bias", "rhs", "residual", "relative_residual"],
               [[i, float(r.lhs[0]), float(r.bias[0]), float(r.rhs[0]), r.residual,
                 r.relative_residual] for i, r in enumerate(reports)])
    metrics = {"max_relative_residual": float(rel.max()),
               "mean_relative_residual": float(rel.mean()),
               "final_loss": float(path.losses[-1]), "record": cfg["record"]}
    return metrics, {"residual": {"tol": float(cfg["tol"]),
                                  "ok": bool(rel.max() <= float(cfg["tol"]))}}


def _sweep_setup(cfg, seed):
    if cfg["model"] == "mlp":
        ds = data.gen_ball_sphere(int(cfg["N"]), seed)
        spec = nn.ModelSpec.mlp(2, int(cfg["r"]))
        t = np.linspace(-1.25, 1.25, int(cfg["grid"]))
        Q = np.array([(a, b) for a in t for b in t])
    elif cfg["model"] == "conv":
        p, q = int(cfg.get("p", 8)), int(cfg.get("q", 4))
        ds = data.gen_xl_dataset(p, int(cfg.get("l", 4)), int(cfg.get("N_conv", 64)), seed,
                                 outputs=q)
        spec = nn.ModelSpec.conv1d_parity(p, int(cfg.get("r_conv", 2)), q=q)
        Q = np.random.default_rng(seed + 1).integers(0, 2, (int(cfg["grid"]), p)).astype(float)
    else:
        raise ConfigError("model must be 'mlp' or 'conv'")
    return spec, ds, Q


def run_decomposition_sweep(cfg, out):
    seed = _seeds(cfg)[0]
    spec, ds, Q = _sweep_setup(cfg, seed)
    w0 = nn.init_params(spec, seed).data
    K = int(cfg["K"])
    runs = [kernel.SweepRun(spec, ds, w0, float(eta), K, Q) for eta in cfg["etas"]]
    lin = _linreg_dataset(5, 50, seed)
    lspec = nn.ModelSpec.linear(5)
    control = kernel.SweepRun(lspec, lin, nn.init_params(lspec, seed).data, 1e-2, K,
                              np.random.default_rng(seed + 1).standard_normal((20, 5)))
    rows = kernel.decomposition_residual_sweep(runs)
    ctrl = kernel.decomposition_residual_sweep([control])[0]
    kernel.write_sweep_csv(rows, out / "sweep.csv")
    kernel.write_sweep_csv([ctrl], out / "sweep_control.csv")
    means = [row["mean_residual"] for row in rows]
    order = np.argsort([-float(e) for e in cfg["etas"]])
    ordered = [means[i] for i in order]
    decreasing = all(a > b for a, b in zip(ordered, ordered[1:]))
    metrics = {"rows": rows, "control": ctrl, "model": cfg["model"]}
    return metrics, {"decreasing_in_eta": {"ok": decreasing},
                     "linear_control": {"ok": ctrl["max_residual"] <= 1e-9}}


def _trained_ball_sphere(cfg, out, seed):
    ds = data.gen_ball_sphere(int(cfg["N"]), seed)
    spec = nn.ModelSpec.mlp(2, int(cfg["r"]))
    K = int(cfg["K"])
    path = _train(cfg, spec, nn.init_params(spec, seed), ds, seed, out,
                  stride=max(K - 1, 1))
    return spec, ds, path


def run_neighbors(cfg, out):
    seed = _seeds(cfg)[0]
    spec, ds, path = _trained_ball_sphere(cfg, out, seed)
    angle = np.random.default_rng(seed + 7).uniform(0.0, 2.0 * np.pi)
    u = np.array([np.cos(angle), np.sin(angle)])
    rep = analysis.neighbor_sweep(path, ds, u, cfg["lambdas"], int(cfg["k"]))
    analysis.write_neighbors_csv(rep, out / "neighbors.csv")
    analysis.write_neighbors_csv(rep, out / "neighbors_euclidean.csv", which="euclidean")
    metrics = {"direction": u, "lambdas": list(rep.lambdas), "overlaps": rep.overlaps,
               "mean_overlap": rep.mean_overlap, "snapshot": rep.snapshot,
               "train_accuracy": training.accuracy(spec, path.final, ds)}
    return metrics, {"overlap_positive": {"ok": rep.mean_overlap > 0.0}}


def run_probe(cfg, out):
    seed = _seeds(cfg)[0]
    spec, ds, path = _trained_ball_sphere(cfg, out, seed)
    F = analysis.feature_matrix(path, ds, max(path.steps - 1, 0))
    feat = analysis.linear_probe_train(F, ds.labels)
    raw = analysis.linear_probe_train(ds.inputs, ds.labels)
    a = analysis.embedded_regressor(spec, path.final)
    Q = np.random.default_rng(seed + 3).uniform(-2.0, 2.0, (int(cfg["queries"]), 2))
    Fq = nn.batch_jacobian(spec, path.final, Q)[:, 0, :]
    ident = float(np.max(np.abs(Fq @ a - nn.predict(spec, path.final, Q)[:, 0])))
    F_final = nn.batch_jacobian(spec, path.final, ds.inputs)[:, 0, :]
    own = analysis.probe_from_regressor(spec, path.final)
    net_pred = np.where(nn.predict(spec, path.final, ds.inputs)[:, 0] >= 0.0, 1.0, -1.0)
    agreement = float(np.mean(own.predict(F_final) == net_pred))
    results = {"features": feat.train_accuracy, "raw": raw.train_accuracy,
               "embedded": own.accuracy(F_final, ds.labels)}
    analysis.write_probe_csv(results, out / "probe.csv")
    net_acc = training.accuracy(spec, path.final, ds)
    metrics = {"probe_accuracy": results, "embedded_identity_max_error": ident,
               "embedded_sign_agreement": agreement, "train_accuracy": net_acc,
               "feature_probe_hinge_loss": feat.hinge_loss}
    checks = {"features_separable": {"ok": net_acc == 1.0 and feat.train_accuracy == 1.0},
              "raw_not_separable": {"ok": raw.train_accuracy < 1.0},
              "embedded_identity": {"tol": 1e-10, "ok": ident <= 1e-10}}
    return metrics, checks


def run_pca(cfg, out):
    seed = _seeds(cfg)[0]
    if cfg["dataset"] == "two-peak":
        train, full = data.two_peak_subset(int(cfg["p"]), int(cfg["N"]), seed)
    elif cfg["dataset"] == "ball-sphere":
        train = full = data.gen_ball_sphere(int(cfg["N"]), seed)
    else:
        raise ConfigError("dataset must be 'two-peak' or 'ball-sphere'")
    spec = nn.ModelSpec.mlp(train.p, int(cfg["r"]))
    K = int(cfg["K"])
    path = _train(cfg, spec, nn.init_params(spec, seed), train, seed, out,
                  stride=max(K - 1, 1))
    w = path.weights_at(max(K - 1, 0))
    F = nn.batch_jacobian(spec, w, full.inputs)[:, 0, :]
    coords, var = analysis.pca_project(F, 2)
    analysis.write_pca_csv(coords, full.labels, out / "pca.csv")
    metrics = {"variances": var, "points": full.n, "dataset": cfg["dataset"],
               "accuracy": training.accuracy(spec, path.final, full)}
    return metrics, {"variances_ordered": {"ok": bool(var[0] >= var[-1])}}


RUNNERS = {
    "ball-sphere": run_ball_sphere, "halfspace": run_halfspace, "two-peak": run_two_peak,
    "parity-train": run_parity_train, "parity-verify": run_parity_verify,
    "linreg-exact": run_linreg_exact, "decomposition-sweep": run_decomposition_sweep,
    "neighbors": run_neighbors, "probe": run_probe, "pca": run_pca,
}


# ------------------------------------------------------------------ config

def build_config(kind=None, preset=None, config_file=None, overrides=None) -> dict:
    """Defaults < preset < config file < command-line overrides."""
    layers = []
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
        layers.append(PRESETS[preset])
    if config_file:
        with open(config_file, "rb") as fh:
            layers.append(tomllib.load(fh))
    if overrides:
        layers.append({k: v for k, v in overrides.items() if v is not None})
    for layer in layers:
        kind = layer.get("kind", kind)
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; have {', '.join(KINDS)}")
    cfg = {"kind": kind, "seed": 0}
    cfg.update(DEFAULTS[kind])
    for layer in layers:
        cfg.update(layer)
    cfg["kind"] = kind
    if "seed" in (overrides or {}) and overrides["seed"] is not None:
        cfg["seeds"] = [overrides["seed"]]
    return cfg


def run(cfg: dict, out) -> tuple[int, dict]:
    """Run one experiment; returns (exit status, report)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    # run-control flags stay out of the report so it depends only on the experiment
    shown = {k: v for k, v in cfg.items() if k not in ("check", "save_path")}
    report = {"kind": cfg["kind"], "config": shown}
    status = EXIT_OK
    try:
        log.info("start %s (backend %s)", cfg["kind"], _backend.name())
        t0 = time.perf_counter()
        metrics, checks = RUNNERS[cfg["kind"]](cfg, out)
        log.info("done in %.2fs", time.perf_counter() - t0)
        passed = all(c["ok"] for c in checks.values())
        report.update({"metrics": metrics, "checks": checks,
                       "check": "pass" if passed else "fail"})
        if cfg.get("check") and not passed:
            status = EXIT_CHECK
    except DivergedError as exc:
        log.error("%s", exc)
        report.update({"diverged": {"step": exc.step, "loss": exc.loss}, "check": "fail"})
        status = EXIT_DIVERGED
    finally:
        log.removeHandler(handler)
        handler.close()
    text = json.dumps(_json_safe(report), indent=2, sort_keys=True) + "\n"
    (out / "report.json").write_text(text)
    return status, report


# ------------------------------------------------------------------- argv

def _add_common(sp):
    sp.add_argument("--config", help="TOML file with flat key = value settings")
    sp.add_argument("--preset", help=f"one of {', '.join(sorted(PRESETS))}")
    sp.add_argument("--out", default="out", help="output directory (default: out)")
    sp.add_argument("--seed", type=int, help="single seed (overrides preset seeds)")
    sp.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")],
                    help="comma-separated seeds")
    sp.add_argument("--min-pass", dest="min_pass", type=int,
                    help="seeds that must pass the check")
    sp.add_argument("--check", action="store_true", default=None,
                    help="exit 3 if an acceptance check fails")
    sp.add_argument("--p", type=int)
    sp.add_argument("--r", type=int)
    sp.add_argument("--N", type=int)
    sp.add_argument("--K", type=int)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--save-path", dest="save_path", action="store_true", default=None,
                    help="write path.bin (+ path.json) with the full learning path")
    sp.add_argument("--record", choices=["snapshots", "streaming"],
                    help="how the decomposition is accumulated")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tkl", description="Tangent-kernel experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("run", help="run any experiment kind")
    sp.add_argument("kind", help=" | ".join(KINDS))
    _add_common(sp)
    for name, help_ in [("train", "train a classification preset"),
                        ("verify", "check the decomposition on linear regression"),
                        ("sweep", "residual versus learning rate"),
                        ("neighbors", "NTK versus Euclidean neighbors"),
                        ("probe", "linear probes on features and inputs"),
                        ("pca", "PCA of feature vectors"),
                        ("parity", "hand-built parity network or its training study")]:
        sp = sub.add_parser(name, help=help_)
        _add_common(sp)
        if name == "train":
            sp.add_argument("--kind", choices=["ball-sphere", "halfspace", "two-peak"])
        if name == "sweep":
            sp.add_argument("--model", choices=["mlp", "conv"])
        if name == "parity":
            sp.add_argument("--train", action="store_true",
                            help="run the perturbed-init training study")
            sp.add_argument("--init", choices=["perturbed", "random"])
            sp.add_argument("--sigma", type=float)
            sp.add_argument("--l", type=int)
    return ap


_FLAG_KEYS = ("seed", "seeds", "min_pass", "check", "p", "r", "N", "K", "eta", "save_path",
              "record", "model", "init", "sigma", "l")


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    default = SUBCOMMAND_KIND.get(args.command)
    explicit = None
    if args.command == "run":
        explicit = args.kind
    elif args.command == "train":
        explicit = args.kind  # otherwise the preset decides
    elif args.command == "parity":
        explicit = "parity-train" if args.train or args.init else "parity-verify"
    else:
        explicit = default
    overrides = {k: getattr(args, k, None) for k in _FLAG_KEYS}
    overrides["kind"] = explicit
    try:
        cfg = build_config(default, args.preset, args.config, overrides)
    except (ConfigError, OSError, tomllib.TOMLDecodeError) as exc:
        print(f"tkl: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    threads = os.environ.get("TKL_THREADS")
    limit = contextlib.nullcontext()
    if threads:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(int(threads))
    with limit:
        try:
            status, report = run(cfg, args.out)
        except (ConfigError, ValueError) as exc:
            print(f"tkl: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    print(f"{cfg['kind']}: check={report['check']} -> {Path(args.out) / 'report.json'}")
    return status


if __name__ == "__main__":
    sys.exit(main())
