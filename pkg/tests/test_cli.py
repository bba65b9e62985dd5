"""Command-line interface: subcommands, exit codes, artifacts, determinism."""

import json
import os

import numpy as np
import pytest

from msafe import cli, io, pipeline, simulate


@pytest.fixture
def workspace(tmp_path):
    ds = simulate.synthetic_dataset(n_obs=40, n_sensors=3, seed=2)
    rng = np.random.default_rng(3)
    from dataclasses import replace

    ds = replace(ds, responses=ds.signals[0, :40] + 0.1 * rng.standard_normal(40))
    sig = str(tmp_path / "signals.csv")
    obs = str(tmp_path / "observations.csv")
    io.dump_dataset(ds, sig, obs)
    cfg = {
        "mode": "multiscale",
        "n": 1,
        "m": 1,
        "q": 6,
        "stages": 1,
        "seed": 0,
        "log_lambda": list(np.arange(-2.5, 0.0 + 1e-9, 0.5)),
        "log_phi_t": [0.0],
        "log_phi_z": [0.0],
        "relative_lambda": True,
        "solver_tol": 1e-4,
        "solver_max_iter": 200,
        "signals_path": sig,
        "positions_path": obs,
        "output_dir": str(tmp_path / "out"),
    }
    cfg_path = str(tmp_path / "config.json")
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)
    return tmp_path, cfg_path, sig, obs


def test_inspect_basis_prints_json(capsys):
    assert cli.main(["inspect-basis", "--kind", "multiscale", "--n", "2"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["dim"] == 16
    assert info["max_cross_level_gram"] < 1e-12


def test_usage_error_exit_code_1(capsys):
    assert cli.main(["select"]) == 1  # missing input paths
    assert cli.main(["no-such-command"]) == 1


def test_data_error_exit_code_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,s1\n0.0,1.0\n0.0,oops\n")
    obs = tmp_path / "obs.csv"
    obs.write_text("time,position,response\n1.0,0.5,0.1\n")
    code = cli.main(["select", "--signals", str(bad), "--positions", str(obs)])
    assert code == 2
    assert "data error" in capsys.readouterr().err


def test_numerical_error_exit_code_3(workspace, monkeypatch, capsys):
    _, cfg_path, _, _ = workspace

    def boom(*a, **k):
        raise np.linalg.LinAlgError("synthetic failure")

    monkeypatch.setattr(pipeline, "run_full", boom)
    assert cli.main(["run", "--config", cfg_path]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_assemble_writes_blocks_and_manifest(workspace, capsys):
    tmp_path, cfg_path, sig, obs = workspace
    assert cli.main(["assemble", "--config", cfg_path]) == 0
    out = tmp_path / "out"
    blocks = sorted(p.name for p in out.glob("block_*.txt"))
    assert blocks == ["block_01.txt", "block_02.txt", "block_03.txt"]
    manifest = json.loads((out / "assemble_manifest.json").read_text())
    assert manifest["inputs"][sig] == io.content_hash(sig)


def test_select_then_estimate(workspace, capsys):
    tmp_path, cfg_path, _, _ = workspace
    assert cli.main(["select", "--config", cfg_path]) == 0
    selection = json.loads((tmp_path / "out" / "selection.json").read_text())
    assert selection[-1]["stage"] >= 1
    capsys.readouterr()
    assert cli.main(["estimate", "--config", cfg_path, "--sensors", "1,2"]) == 0
    est = json.loads((tmp_path / "out" / "estimate.json").read_text())
    assert est["active_sensors"] == [1, 2]
    assert set(est["betas"]) == {"1", "2"}
    assert cli.main(["estimate", "--config", cfg_path, "--sensors", "1,x"]) == 1


def test_run_writes_report_and_is_deterministic(workspace, capsys):
    tmp_path, cfg_path, _, _ = workspace
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg_path, "--predictions"]) == 0
    first = (out / "report.json").read_bytes()
    assert (out / "timings.json").exists()
    assert (out / "run_manifest.json").exists()
    pred_lines = (out / "predictions.csv").read_text().splitlines()
    assert pred_lines[0] == "response,prediction"
    assert len(pred_lines) == 41
    assert cli.main(["run", "--config", cfg_path]) == 0
    assert (out / "report.json").read_bytes() == first
    report = json.loads(first)
    assert "timings" not in report  # timings live in their own file


def test_flag_overrides_config(workspace, capsys):
    tmp_path, cfg_path, _, _ = workspace
    assert cli.main(["run", "--config", cfg_path, "--mode", "spline", "--q", "6"]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["mode"] == "spline"


def test_bench_emits_comparison(workspace, capsys):
    tmp_path, cfg_path, _, _ = workspace
    assert cli.main(["bench", "--config", cfg_path, "--q", "6"]) == 0
    out = tmp_path / "out"
    bench = json.loads((out / "bench.json").read_text())
    assert set(bench) == {"spline", "multiscale"}
    for mode in bench:
        entry = bench[mode]
        assert len(entry["nonzero_fraction_per_block"]) == 3
        assert sum(entry["entry_magnitude_histogram"]["counts"]) > 0
    csv_lines = (out / "bench.csv").read_text().splitlines()
    assert csv_lines[0].startswith("mode,assembly_s")
    assert len(csv_lines) == 3


def test_simulate_cli_single_replicate(tmp_path, capsys):
    out = str(tmp_path / "sim")
    code = cli.main([
        "simulate", "--theta", "0.25", "--eta", "10", "--replicates", "1",
        "--mode", "multiscale", "--stages", "1", "--output-dir", out,
    ])
    assert code == 0
    report = json.loads(open(os.path.join(out, "sim_report.json")).read())
    assert report["replicates"] == 1
    rows = open(os.path.join(out, "sim_rows.csv")).read().splitlines()
    assert rows[0].startswith("theta,eta,mode,replicate")
    assert len(rows) == 2
