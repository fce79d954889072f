import csv
import json

import numpy as np
import pytest

from tkl import cli, data, training


def report(out):
    return json.loads((out / "report.json").read_text())


def rows(file):
    with open(file, newline="") as fh:
        return list(csv.reader(fh))


def test_verify_linreg(tmp_path):
    out = tmp_path / "lr"
    assert cli.main(["verify", "--out", str(out), "--check"]) == 0
    rep = report(out)
    assert rep["kind"] == "linreg-exact" and rep["check"] == "pass"
    assert rep["metrics"]["max_relative_residual"] <= 1e-9
    table = rows(out / "decomposition.csv")
    assert table[0] == ["query", "lhs", "bias", "rhs", "residual", "relative_residual"]
    assert len(table) == 101
    assert (out / "run.log").exists()


def test_verify_streaming_matches_snapshots(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["verify", "--out", str(a), "--K", "200"]) == 0
    assert cli.main(["verify", "--out", str(b), "--K", "200", "--record", "streaming"]) == 0
    ra, rb = rows(a / "decomposition.csv"), rows(b / "decomposition.csv")
    for x, y in zip(ra[1:], rb[1:]):
        assert abs(float(x[3]) - float(y[3])) <= 1e-10


def test_parity_verify_exhaustive(tmp_path, capsys):
    out = tmp_path / "pv"
    assert cli.main(["parity", "--p", "8", "--r", "2", "--out", str(out), "--check"]) == 0
    m = report(out)["metrics"]
    assert m["exact_match"] is True and m["inputs"] == 256 and m["mode"] == "exhaustive"
    assert "check=pass" in capsys.readouterr().out


def test_run_subcommand_any_kind(tmp_path):
    out = tmp_path / "tp"
    code = cli.main(["run", "two-peak", "--p", "8", "--N", "20", "--K", "50",
                     "--out", str(out)])
    assert code == 0
    runs = report(out)["metrics"]["runs"]
    assert len(runs) == 1 and "exhaustive_accuracy" in runs[0]


def test_unknown_kind(tmp_path, capsys):
    assert cli.main(["run", "spiral", "--out", str(tmp_path)]) == 1
    assert "unknown experiment kind" in capsys.readouterr().err


def test_unknown_preset(tmp_path):
    assert cli.main(["train", "--preset", "nope", "--out", str(tmp_path)]) == 1


def test_missing_config_file(tmp_path):
    assert cli.main(["verify", "--config", str(tmp_path / "none.toml"),
                     "--out", str(tmp_path)]) == 1


def test_divergence_exit(tmp_path):
    out = tmp_path / "div"
    assert cli.main(["train", "--eta", "100", "--K", "50", "--N", "64",
                     "--out", str(out)]) == 2
    rep = report(out)
    assert rep["check"] == "fail" and rep["diverged"]["step"] >= 1


def test_check_failure_exit(tmp_path):
    # 20 steps cannot reach 100% on ball-vs-sphere
    args = ["train", "--K", "20", "--N", "64", "--out", str(tmp_path / "c")]
    assert cli.main(args) == 0
    assert report(tmp_path / "c")["check"] == "fail"
    assert cli.main(args + ["--check"]) == 3


def test_report_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["train", "--K", "100", "--N", "64", "--seed", "3"]
    cli.main(args + ["--out", str(a)])
    cli.main(args + ["--out", str(b), "--check"])
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "runs.csv").read_bytes() == (b / "runs.csv").read_bytes()


def test_config_file_layering(tmp_path):
    conf = tmp_path / "c.toml"
    conf.write_text('kind = "halfspace"\nN = 32\nK = 40\nr = 3\nseeds = [1, 2]\n')
    out = tmp_path / "o"
    assert cli.main(["train", "--config", str(conf), "--r", "4", "--out", str(out)]) == 0
    cfg = report(out)["config"]
    assert cfg["kind"] == "halfspace" and cfg["N"] == 32 and cfg["r"] == 4
    assert [r["seed"] for r in report(out)["metrics"]["runs"]] == [1, 2]


def test_build_config_precedence(tmp_path):
    cfg = cli.build_config(preset="paper-5.1")
    assert cfg["kind"] == "ball-sphere" and cfg["K"] == 10000 and cfg["seeds"] == [0, 1, 2, 3, 4]
    assert cli.build_config(preset="paper-6.4")["eta"] == 0.1
    assert cli.build_config(preset="paper-5.2")["target"] == 0.995
    cfg = cli.build_config(preset="paper-5.1", overrides={"K": 7, "seed": 9})
    assert cfg["K"] == 7 and cfg["seeds"] == [9]
    with pytest.raises(cli.ConfigError):
        cli.build_config("no-such-kind")


def test_saved_path_loads(tmp_path):
    out = tmp_path / "sp"
    assert cli.main(["train", "--K", "15", "--N", "16", "--out", str(out), "--save-path"]) == 0
    path = cli.load_path(out / "path.bin")
    assert path.steps == 15 and len(path) == 16
    spec = path.spec
    # replaying one step from the first snapshot lands on the second
    ds = data.gen_ball_sphere(16, 0)
    assert np.array_equal(training.gd_step(spec, path.weights[0], ds, path.etas[0]),
                          path.weights[1])
    assert path.meta["seed"] == 0


def test_sweep_small(tmp_path):
    cfg = cli.build_config("decomposition-sweep", overrides={"K": 20, "N": 64, "grid": 3})
    status, rep = cli.run(cfg, tmp_path)
    assert status == 0
    table = rows(tmp_path / "sweep.csv")
    assert table[0] == ["eta", "K", "mean_residual", "max_residual", "train_accuracy"]
    assert [float(r[0]) for r in table[1:]] == [0.1, 0.01, 0.001]
    ctrl = rows(tmp_path / "sweep_control.csv")
    assert ctrl[0] == table[0] and ctrl[1][-1] == "nan"
    assert rep["checks"]["linear_control"]["ok"]


def test_neighbors_probe_pca_small(tmp_path):
    for kind, files in [("neighbors", ["neighbors.csv", "neighbors_euclidean.csv"]),
                        ("probe", ["probe.csv"]), ("pca", ["pca.csv"])]:
        over = {"K": 30, "N": 64}
        if kind == "pca":
            over = {"K": 30, "N": 20, "p": 8}
        if kind == "neighbors":
            over["k"] = 10
        status, rep = cli.run(cli.build_config(kind, overrides=over), tmp_path / kind)
        assert status == 0, kind
        for f in files:
            assert (tmp_path / kind / f).exists()
    assert rows(tmp_path / "probe" / "probe.csv")[0] == ["split", "accuracy"]
    assert len(rows(tmp_path / "pca" / "pca.csv")) == 1 + 28


def test_parity_train_random_init_is_ungated(tmp_path):
    cfg = cli.build_config("parity-train", overrides={"init": "random", "K": 5, "p": 8,
                                                      "N": 20, "cross_samples": 10})
    status, rep = cli.run(cfg, tmp_path)
    assert status == 0 and rep["checks"] == {} and rep["check"] == "pass"
    run = rep["metrics"]["runs"][0]
    assert {"train_mse", "cross_l_mse", "cross_l_zero_baseline"} <= set(run)


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("TKL_THREADS", "1")
    assert cli.main(["parity", "--p", "4", "--out", str(tmp_path)]) == 0
