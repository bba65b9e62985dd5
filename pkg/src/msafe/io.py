"""Dataset and configuration serialization, plus run manifests.

CSV conventions: header row, comma separator, '.' decimal, UTF-8, times in
seconds.  The signals file holds the common sampling grid (column ``time``)
followed by one column per sensor; the observations file holds one row per
response with columns ``time, position, response``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import pipeline
from .assembly import Dataset


class DataFormatError(ValueError):
    """Malformed input data; message carries file and line context."""


def _parse_csv(path):
    """Rows of floats from a headered CSV, with line-numbered errors."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    width = len(header)
    rows = []
    for lineno, ln in enumerate(lines[1:], start=2):
        fields = ln.split(",")
        if len(fields) != width:
            raise DataFormatError(
                f"{path}:{lineno}: expected {width} fields, got {len(fields)}"
            )
        try:
            vals = [float(x) for x in fields]
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-numeric value") from None
        if any(np.isnan(v) or np.isinf(v) for v in vals):
            raise DataFormatError(f"{path}:{lineno}: non-finite value")
        rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return header, np.asarray(rows)


def _check_monotone(times, path, col="time"):
    bad = np.nonzero(np.diff(times) <= 0)[0]
    if bad.size:
        # +3: header line, 1-based, and the second row of the offending pair
        raise DataFormatError(
            f"{path}:{bad[0] + 3}: {col} column not strictly increasing"
        )


def load_dataset(signals_path, positions_path, window=1.0 / 3.0):
    """Read the signals and observations CSVs into a Dataset."""
    sig_header, sig_rows = _parse_csv(signals_path)
    if len(sig_header) < 2:
        raise DataFormatError(f"{signals_path}: need a time column plus sensors")
    signal_times = sig_rows[:, 0]
    _check_monotone(signal_times, signals_path)
    signals = sig_rows[:, 1:].T.copy()  # K x grid

    obs_header, obs_rows = _parse_csv(positions_path)
    if len(obs_header) != 3:
        raise DataFormatError(
            f"{positions_path}: expected columns time, position, response"
        )
    times = obs_rows[:, 0]
    _check_monotone(times, positions_path)
    return Dataset(
        times=times,
        signal_times=signal_times,
        signals=signals,
        positions=obs_rows[:, 1],
        responses=obs_rows[:, 2],
        window=window,
    )


def dump_dataset(dataset, signals_path, positions_path):
    """Write a Dataset back to the two-CSV layout (round-trips exactly)."""
    with open(signals_path, "w", encoding="utf-8") as fh:
        fh.write("time," + ",".join(f"s{k+1}" for k in range(dataset.n_sensors)) + "\n")
        for j, t in enumerate(dataset.signal_times):
            vals = ",".join(f"{dataset.signals[k, j]:.17g}" for k in range(dataset.n_sensors))
            fh.write(f"{t:.17g},{vals}\n")
    with open(positions_path, "w", encoding="utf-8") as fh:
        fh.write("time,position,response\n")
        for t, z, y in zip(dataset.times, dataset.positions, dataset.responses):
            fh.write(f"{t:.17g},{z:.17g},{y:.17g}\n")


@dataclass
class RunConfig:
    """Full run configuration: model settings plus input/output paths."""

    mode: str = "multiscale"
    p: int = 3
    n: int = 2
    m: int = 2
    q: int = 10
    keep_fraction: float | None = 0.1
    stages: int = 5
    folds: int = 5
    seed: int = 0
    log_lambda: list = field(default_factory=lambda: list(np.arange(-20.0, 0.0 + 1e-9, 0.25)))
    log_phi_t: list = field(default_factory=lambda: list(np.arange(-10.0, 0.0 + 1e-9, 2.5)))
    log_phi_z: list = field(default_factory=lambda: list(np.arange(-10.0, 0.0 + 1e-9, 2.5)))
    ridge_log10_phi: list = field(default_factory=lambda: [-1.0, -2.0, -3.0, -4.0, -5.0])
    relative_lambda: bool = False
    solver_tol: float = 1e-8
    solver_max_iter: int = 100_000
    window: float = 1.0 / 3.0
    signals_path: str | None = None
    positions_path: str | None = None
    output_dir: str = "."

    def __post_init__(self):
        if self.m > self.n:
            raise ValueError("truncation level m must not exceed n")
        if self.keep_fraction is not None and not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must be in (0, 1]")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")

    def grid(self):
        return pipeline.CvGrid(
            log_lambda=np.asarray(self.log_lambda, dtype=float),
            log_phi_t=np.asarray(self.log_phi_t, dtype=float),
            log_phi_z=np.asarray(self.log_phi_z, dtype=float),
            ridge_log10_phi=tuple(self.ridge_log10_phi),
            folds=self.folds,
            relative_lambda=self.relative_lambda,
        )

    def model_config(self):
        return pipeline.ModelConfig(
            mode=self.mode,
            p=self.p,
            n=self.n,
            m=self.m,
            q=self.q,
            keep_fraction=self.keep_fraction,
            stages=self.stages,
            seed=self.seed,
            grid=self.grid(),
            solver_tol=self.solver_tol,
            solver_max_iter=self.solver_max_iter,
        )

    def to_json(self):
        d = asdict(self)
        for key in ("log_lambda", "log_phi_t", "log_phi_z", "ridge_log10_phi"):
            d[key] = [float(v) for v in d[key]]
        return d

    @classmethod
    def from_json(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise DataFormatError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(data)


def content_hash(path):
    """sha256 of a file's bytes, hex-encoded."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, config, input_paths):
    """Machine-readable record of a run: config plus input content hashes."""
    manifest = {
        "config": config.to_json() if isinstance(config, RunConfig) else config,
        "inputs": {str(p): content_hash(p) for p in input_paths},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
