"""CSV ingestion/serialization, configuration, and manifests."""

import json

import numpy as np
import pytest

from msafe import io, simulate
from msafe.io import (
    DataFormatError,
    RunConfig,
    content_hash,
    dump_dataset,
    load_dataset,
    write_manifest,
)


@pytest.fixture
def dataset():
    return simulate.synthetic_dataset(n_obs=25, n_sensors=3, seed=1)


def paths(tmp_path):
    return str(tmp_path / "signals.csv"), str(tmp_path / "observations.csv")


def test_round_trip_is_exact(tmp_path, dataset):
    sig, obs = paths(tmp_path)
    dump_dataset(dataset, sig, obs)
    back = load_dataset(sig, obs, window=dataset.window)
    for field in ("times", "signal_times", "signals", "positions", "responses"):
        a, b = getattr(dataset, field), getattr(back, field)
        assert np.max(np.abs(a - b)) < 1e-15
    assert back.n_sensors == dataset.n_sensors


def test_empty_file_names_the_file(tmp_path, dataset):
    sig, obs = paths(tmp_path)
    dump_dataset(dataset, sig, obs)
    open(sig, "w").close()
    with pytest.raises(DataFormatError, match="empty file"):
        load_dataset(sig, obs)


def test_ragged_row_reports_line_number(tmp_path, dataset):
    sig, obs = paths(tmp_path)
    dump_dataset(dataset, sig, obs)
    lines = open(sig).read().splitlines()
    lines[4] = lines[4].rsplit(",", 1)[0]  # drop one field on line 5
    open(sig, "w").write("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match=r":5: expected \d+ fields"):
        load_dataset(sig, obs)


def test_non_numeric_reports_line_number(tmp_path, dataset):
    sig, obs = paths(tmp_path)
    dump_dataset(dataset, sig, obs)
    lines = open(obs).read().splitlines()
    lines[2] = lines[2].replace(lines[2].split(",")[2], "oops")
    open(obs, "w").write("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match=":3: non-numeric"):
        load_dataset(sig, obs)


def test_nan_rejected(tmp_path, dataset):
    sig, obs = paths(tmp_path)
    dump_dataset(dataset, sig, obs)
    lines = open(obs).read().splitlines()
    parts = lines[3].split(",")
    parts[2] = "nan"
    lines[3] = ",".join(parts)
    open(obs, "w").write("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match=":4: non-finite"):
        load_dataset(sig, obs)


def test_shuffled_time_column_reports_first_offender(tmp_path, dataset):
    sig, obs = paths(tmp_path)
    dump_dataset(dataset, sig, obs)
    lines = open(obs).read().splitlines()
    lines[2], lines[3] = lines[3], lines[2]
    open(obs, "w").write("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match="not strictly increasing"):
        load_dataset(sig, obs)


def test_runconfig_validation():
    with pytest.raises(ValueError):
        RunConfig(m=3, n=2)
    with pytest.raises(ValueError):
        RunConfig(keep_fraction=1.5)
    with pytest.raises(ValueError):
        RunConfig(stages=0)


def test_runconfig_json_round_trip():
    cfg = RunConfig(mode="spline", q=8, stages=2, seed=5)
    back = RunConfig.from_json(cfg.to_json())
    assert back == cfg


def test_runconfig_rejects_unknown_keys():
    with pytest.raises(DataFormatError, match="unknown config keys"):
        RunConfig.from_json({"mode": "spline", "colour": "blue"})


def test_runconfig_from_file_rejects_bad_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{not json")
    with pytest.raises(DataFormatError, match="invalid JSON"):
        RunConfig.from_file(str(path))


def test_runconfig_builds_model_config():
    cfg = RunConfig(mode="multiscale", n=1, m=1, stages=2, relative_lambda=True)
    model = cfg.model_config()
    assert model.mode == "multiscale"
    assert model.stages == 2
    assert model.grid.relative_lambda


def test_content_hash_tracks_content(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("hello")
    h1 = content_hash(str(p))
    assert h1 == content_hash(str(p))
    p.write_text("hello!")
    assert content_hash(str(p)) != h1


def test_write_manifest(tmp_path, dataset):
    sig, obs = paths(tmp_path)
    dump_dataset(dataset, sig, obs)
    cfg = RunConfig(signals_path=sig, positions_path=obs)
    out = tmp_path / "manifest.json"
    manifest = write_manifest(str(out), cfg, [sig, obs])
    loaded = json.loads(out.read_text())
    assert loaded == manifest
    assert loaded["inputs"][sig] == content_hash(sig)
    assert loaded["config"]["mode"] == "multiscale"
