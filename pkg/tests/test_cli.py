import csv
import json

import pytest

from pbgd.cli import main


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def test_solve_quadratic_auto_steps(tmp_path):
    rc = main(
        [
            "solve", "--problem", "quadratic", "--algo", "v-pbgd",
            "--gamma", "10", "--auto-steps", "--K", "400", "--inner-T", "1",
            "--y0", "1.0", "--x0", "0.0", "--tol", "1e-9",
            "--out", str(tmp_path),
        ]
    )
    assert rc == 0
    summary = read_json(tmp_path / "summary.json")
    assert summary["final_y"][0] == pytest.approx(-0.05, abs=1e-6)
    assert summary["termination"] == "StationarityReached"
    assert summary["library_version"]
    assert summary["seed"] == 0
    assert summary["resolved_steps"]["alpha"] == pytest.approx(1 / 50)


def test_trace_schema_and_formatting(tmp_path):
    main(
        [
            "solve", "--problem", "quadratic", "--algo", "v-pbgd", "--gamma", "10",
            "--K", "7", "--inner-T", "1", "--tol", "0", "--y0", "0.3", "--x0", "0",
            "--out", str(tmp_path),
        ]
    )
    with open(tmp_path / "trace.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == [
        "k", "f_value", "penalty_value", "F_gamma",
        "proj_grad_norm_sq", "inner_iters", "elapsed_ns",
    ]
    assert len(rows) == 1 + 7
    assert rows[1][0] == "1"
    # 17 significant digits survive a round trip
    assert float(rows[1][2]) == pytest.approx(0.09, abs=1e-15)
    assert rows[1][6] == "0"  # deterministic trace zeroes wall time


def test_solve_deterministic_byte_identical(tmp_path):
    args = [
        "solve", "--problem", "toy-nc", "--algo", "v-pbgd", "--gamma", "10",
        "--alpha", "0.004", "--beta", "0.06", "--K", "50", "--inner-T", "10",
        "--seed", "7", "--tol", "0",
    ]
    d1, d2 = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(d1)]) == 0
    assert main(args + ["--out", str(d2)]) == 0
    assert (d1 / "trace.csv").read_bytes() == (d2 / "trace.csv").read_bytes()
    assert (d1 / "summary.json").read_bytes() == (d2 / "summary.json").read_bytes()


def test_solve_rejects_pbpl_without_hvp(tmp_path):
    rc = main(
        [
            "solve", "--problem", "hyperclean-synthetic", "--algo", "pbpl",
            "--gamma", "1", "--K", "3", "--out", str(tmp_path),
        ]
    )
    assert rc == 2


def test_solve_rejects_constrained_algo_on_unconstrained_problem(tmp_path):
    rc = main(
        ["solve", "--problem", "quadratic", "--algo", "v-pbgd-con", "--out", str(tmp_path)]
    )
    assert rc == 2


def test_config_file_layering(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"problem": "quadratic", "algo": "v-pbgd",
                               "gamma": 5.0, "K": 200, "inner_T": 1,
                               "x0": [0.0], "y0": [1.0]}))
    out1 = tmp_path / "o1"
    assert main(["solve", "--config", str(cfg), "--out", str(out1)]) == 0
    s1 = read_json(out1 / "summary.json")
    assert s1["config"]["gamma"] == 5.0
    # flags override the config file
    out2 = tmp_path / "o2"
    assert main(["solve", "--config", str(cfg), "--gamma", "10", "--out", str(out2)]) == 0
    s2 = read_json(out2 / "summary.json")
    assert s2["config"]["gamma"] == 10.0
    assert s2["final_y"][0] == pytest.approx(-0.05, abs=1e-5)


def test_sweep_needs_three_gammas(tmp_path):
    rc = main(
        [
            "sweep", "--problem", "quadratic", "--algo", "v-pbgd",
            "--gammas", "1,10", "--out", str(tmp_path),
        ]
    )
    assert rc == 2


def test_sweep_quadratic_recovers_quadratic_scaling(tmp_path):
    # terminal value gap is 1/(4 gamma^2): the fitted slope is exactly -2
    rc = main(
        [
            "sweep", "--problem", "quadratic", "--algo", "v-pbgd",
            "--gammas", "1,3,10,30", "--alpha-over-gamma", "0.2",
            "--inner-T", "1", "--K", "100000", "--tol-gsq", "1e-8",
            "--out", str(tmp_path),
        ]
    )
    assert rc == 0
    slopes = read_json(tmp_path / "slopes.json")
    assert slopes["slope_penalty_vs_gamma"] == pytest.approx(-2.0, abs=0.05)
    with open(tmp_path / "sweep.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "gamma"
    assert len(rows) == 5


def test_check_all_exit_zero(tmp_path):
    rc = main(["check", "all", "--fast", "--out", str(tmp_path)])
    assert rc == 0
    checks = read_json(tmp_path / "checks.json")
    assert set(checks) == {
        "constrained-toy", "example-intro", "hyperclean-synthetic", "quadratic", "toy-nc",
    }
    for reports in checks.values():
        for r in reports:
            assert r["status"] in ("pass", "skipped")
            assert "worst_residual" in r


def test_check_forced_counterexample(tmp_path):
    rc = main(
        [
            "check", "quadratic", "--rho", "0.5", "--kind", "value-gap",
            "--samples", "400", "--out", str(tmp_path),
        ]
    )
    assert rc == 1
    checks = read_json(tmp_path / "checks.json")
    assert checks["quadratic"][0]["status"] == "fail"


def test_hyperclean_outputs_and_determinism(tmp_path):
    args = [
        "hyperclean", "--n-train", "60", "--n-val", "80", "--dim", "3",
        "--noise", "0.3", "--K", "500", "--seed", "3",
    ]
    d1, d2 = tmp_path / "h1", tmp_path / "h2"
    assert main(args + ["--out", str(d1)]) == 0
    assert main(args + ["--out", str(d2)]) == 0
    assert (d1 / "hyperclean.json").read_bytes() == (d2 / "hyperclean.json").read_bytes()
    assert (d1 / "weights.csv").read_bytes() == (d2 / "weights.csv").read_bytes()
    res = read_json(d1 / "hyperclean.json")
    assert res["n_corrupted"] == 18
    assert 0.0 <= res["mean_weight_corrupted"] <= 1.0
    with open(d1 / "weights.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["index", "corrupted", "weight"]
    assert len(rows) == 61


def test_solve_problem_param_passthrough(tmp_path):
    rc = main(
        [
            "solve", "--problem", "quadratic", "--problem-param", "noise_std=0.1",
            "--algo", "v-pbsgd", "--gamma", "10", "--K", "50", "--inner-T", "3",
            "--batch-size", "8", "--tol", "0", "--x0", "0", "--y0", "1",
            "--seed", "5", "--out", str(tmp_path),
        ]
    )
    assert rc == 0
    summary = read_json(tmp_path / "summary.json")
    assert summary["algorithm"] == "v-pbsgd"
    assert summary["iterations"] == 50


def test_sweep_parallel_workers_match_sequential(tmp_path):
    args = [
        "sweep", "--problem", "quadratic", "--algo", "v-pbgd",
        "--gammas", "1,3,10", "--alpha-over-gamma", "0.2", "--inner-T", "1",
        "--K", "5000", "--tol-gsq", "1e-8",
    ]
    d1, d2 = tmp_path / "seq", tmp_path / "par"
    assert main(args + ["--out", str(d1)]) == 0
    assert main(args + ["--workers", "2", "--out", str(d2)]) == 0
    assert (d1 / "sweep.csv").read_bytes() == (d2 / "sweep.csv").read_bytes()


def test_hyperclean_zero_noise_reports_na(tmp_path):
    rc = main(
        [
            "hyperclean", "--n-train", "40", "--n-val", "40", "--dim", "3",
            "--noise", "0", "--K", "50", "--out", str(tmp_path),
        ]
    )
    assert rc == 0
    res = read_json(tmp_path / "hyperclean.json")
    assert res["n_corrupted"] == 0
    assert res["mean_weight_corrupted"] is None
    assert res["weight_separation"] is None
