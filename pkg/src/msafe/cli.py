"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every data-processing command writes a manifest (config + input hashes) next
to its outputs, and run reports are deterministic for a fixed config+seed;
wall-clock timings go to a separate file.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import replace

import click
import numpy as np

from . import assembly, basis, io, pipeline, simulate
from .assembly import PenaltyNotSPDError, WindowError
from .grouplasso import SingularFactorError

_DATA_ERRORS = (io.DataFormatError, WindowError)
_NUMERICAL_ERRORS = (PenaltyNotSPDError, SingularFactorError, np.linalg.LinAlgError)


def _config_from(ctx_params, config_path):
    cfg = io.RunConfig.from_file(config_path) if config_path else io.RunConfig()
    overrides = {k: v for k, v in ctx_params.items() if v is not None and k in io.RunConfig.__dataclass_fields__}
    return replace(cfg, **overrides) if overrides else cfg


def _load(cfg):
    if not cfg.signals_path or not cfg.positions_path:
        raise click.UsageError("signals and positions paths are required")
    return io.load_dataset(cfg.signals_path, cfg.positions_path, window=cfg.window)


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


_shared = [
    click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                 help="JSON config file; flags override its fields."),
    click.option("--mode", type=click.Choice(["multiscale", "spline"]), default=None),
    click.option("--p", type=int, default=None),
    click.option("--n", type=int, default=None),
    click.option("--m", type=int, default=None),
    click.option("--q", type=int, default=None),
    click.option("--keep-fraction", "keep_fraction", type=float, default=None),
    click.option("--stages", type=int, default=None),
    click.option("--folds", type=int, default=None),
    click.option("--seed", type=int, default=None),
    click.option("--window", type=float, default=None),
    click.option("--signals", "signals_path", type=click.Path(exists=True), default=None),
    click.option("--positions", "positions_path", type=click.Path(exists=True), default=None),
    click.option("--output-dir", "output_dir", type=click.Path(), default=None),
]


def _with_shared(fn):
    for opt in reversed(_shared):
        fn = opt(fn)
    return fn


@click.group()
def cli():
    """Multiscale sensor selection for historical functional linear models."""


@cli.command("inspect-basis")
@click.option("--kind", type=click.Choice(["multiscale", "spline"]), default="multiscale")
@click.option("--p", type=int, default=3)
@click.option("--n", type=int, default=2)
@click.option("--q", type=int, default=10)
def inspect_basis(kind, p, n, q):
    """Print basis dimensions, levels, supports and orthogonality residual."""
    b = basis.build_multiscale_basis(p, n) if kind == "multiscale" else basis.build_spline_basis(q)
    off = np.abs(b.gram - np.diag(np.diag(b.gram)))
    cross = 0.0
    for i in range(b.dim):
        for j in range(b.dim):
            if b.levels[i] != b.levels[j]:
                cross = max(cross, abs(b.gram[i, j]))
    info = {
        "kind": b.kind,
        "dim": b.dim,
        "degree": b.degree,
        "levels": [int(l) for l in b.levels],
        "supports": [
            [float(f.breakpoints[0]), float(f.breakpoints[-1])] for f in b.functions
        ],
        "max_offdiagonal_gram": float(off.max()),
        "max_cross_level_gram": float(cross),
    }
    click.echo(json.dumps(info, indent=2))


@cli.command()
@_with_shared
def assemble(config_path, **params):
    """Assemble design blocks and write them as triplet files."""
    cfg = _config_from(params, config_path)
    dataset = _load(cfg)
    model = cfg.model_config()
    _, _, blocks, _, _ = pipeline.prepare_blocks(dataset, model)
    out = _outdir(cfg)
    for b in blocks:
        assembly.dump_block(b, os.path.join(out, f"block_{b.sensor + 1:02d}.txt"))
    io.write_manifest(os.path.join(out, "assemble_manifest.json"), cfg,
                      [cfg.signals_path, cfg.positions_path])
    click.echo(f"wrote {len(blocks)} blocks to {out}")


@cli.command()
@_with_shared
def select(config_path, **params):
    """Run the multistage sensor selection and write the stage history."""
    cfg = _config_from(params, config_path)
    dataset = _load(cfg)
    stages = pipeline.select_sensors(dataset, config=cfg.model_config())
    out = _outdir(cfg)
    report = [
        {
            "stage": s.index,
            "active_sensors": [k + 1 for k in s.active],
            "chosen": s.chosen,
            "cv_mse": s.cv_mse,
        }
        for s in stages
    ]
    _write_json(os.path.join(out, "selection.json"), report)
    io.write_manifest(os.path.join(out, "select_manifest.json"), cfg,
                      [cfg.signals_path, cfg.positions_path])
    click.echo(json.dumps(report[-1]))


@cli.command()
@click.option("--sensors", required=True, help="comma-separated 1-based active sensors")
@_with_shared
def estimate(sensors, config_path, **params):
    """Ridge-estimate kernels for a given active sensor set."""
    cfg = _config_from(params, config_path)
    try:
        active = [int(s) - 1 for s in sensors.split(",")]
    except ValueError:
        raise click.UsageError("--sensors must be comma-separated integers")
    dataset = _load(cfg)
    model = cfg.model_config()
    _, _, blocks, _, comps = pipeline.prepare_blocks(dataset, model, sparsify=False)
    est = pipeline.estimate_kernels(
        blocks, dataset.responses, active, comps, model.grid, model.mode, model.seed
    )
    out = _outdir(cfg)
    report = {
        "active_sensors": sorted(k + 1 for k in active),
        "chosen": est["chosen"],
        "cv_mse": est["cv_mse"],
        "ridge_fallback": est["ridge_fallback"],
        "betas": {str(k + 1): list(v) for k, v in est["betas"].items()},
    }
    _write_json(os.path.join(out, "estimate.json"), report)
    click.echo(json.dumps({k: report[k] for k in ("active_sensors", "chosen", "cv_mse")}))


@cli.command()
@click.option("--predictions/--no-predictions", default=False,
              help="also write per-observation (y, yhat) pairs as CSV")
@_with_shared
def run(predictions, config_path, **params):
    """Full pipeline: assemble, select, estimate; write the run report."""
    cfg = _config_from(params, config_path)
    dataset = _load(cfg)
    result = pipeline.run_full(dataset, cfg.model_config())
    out = _outdir(cfg)
    report = result.report()
    timings = report.pop("timings", None)
    # report artifacts use 1-based sensor labels
    report["selected_sensors"] = [k + 1 for k in report.pop("selected")]
    for stage in report["stages"]:
        stage["active_sensors"] = [k + 1 for k in stage.pop("active")]
    _write_json(os.path.join(out, "report.json"), report)
    _write_json(os.path.join(out, "timings.json"), timings)
    io.write_manifest(os.path.join(out, "run_manifest.json"), cfg,
                      [cfg.signals_path, cfg.positions_path])
    if predictions:
        yhat = pipeline.predict(result.fit, dataset)
        with open(os.path.join(out, "predictions.csv"), "w", encoding="utf-8") as fh:
            fh.write("response,prediction\n")
            for y, p in zip(dataset.responses, yhat):
                fh.write(f"{y:.17g},{p:.17g}\n")
    click.echo(json.dumps({"selected_sensors": report["selected_sensors"],
                           "cv_mse": report["cv_mse"]}))


@cli.command("simulate")
@click.option("--theta", multiple=True, type=float, default=(0.25,))
@click.option("--eta", multiple=True, type=float, default=(10.0,))
@click.option("--replicates", type=int, default=20, help="J; use 100 for the full protocol")
@click.option("--mode", "modes", multiple=True,
              type=click.Choice(["multiscale", "spline"]), default=("multiscale", "spline"))
@click.option("--seed", type=int, default=0)
@click.option("--snr", type=float, default=10.0)
@click.option("--stages", type=int, default=2)
@click.option("--output-dir", "output_dir", type=click.Path(), default=".")
def simulate_cmd(theta, eta, replicates, modes, seed, snr, stages, output_dir):
    """Run the correlated-noise simulation study."""
    def config_for(mode):
        return replace(simulate.default_sim_config(mode), stages=stages)

    report = simulate.run_sim(
        thetas=tuple(theta), etas=tuple(eta), replicates=replicates,
        modes=tuple(modes), seed=seed, snr=snr, config_for_mode=config_for,
    )
    os.makedirs(output_dir, exist_ok=True)
    _write_json(os.path.join(output_dir, "sim_report.json"), report.to_json())
    with open(os.path.join(output_dir, "sim_rows.csv"), "w", encoding="utf-8") as fh:
        fh.write("theta,eta,mode,replicate,size,false_positive,cv_mse,time,selected\n")
        for r in report.rows:
            sel = ";".join(str(s) for s in r["selected"])
            fh.write(f"{r['theta']},{r['eta']},{r['mode']},{r['replicate']},"
                     f"{r['size']},{r['false_positive']},{r['cv_mse']:.10g},"
                     f"{r['time']:.3f},{sel}\n")
    click.echo(json.dumps(report.to_json()["summary"], indent=2))


_HIST_BINS = [0.0] + [10.0**e for e in range(-12, 3)]


def _block_stats(blocks):
    fracs, hist = [], np.zeros(len(_HIST_BINS) - 1, dtype=int)
    for b in blocks:
        mat = b.matrix
        total = mat.shape[0] * mat.shape[1]
        fracs.append(mat.nnz / total)
        mags = np.abs(np.asarray(mat.todense())).ravel()
        hist += np.histogram(mags, bins=_HIST_BINS)[0]
    return fracs, hist


@cli.command()
@_with_shared
def bench(config_path, **params):
    """Compare spline vs multiscale modes on the same dataset and seed."""
    cfg = _config_from(params, config_path)
    dataset = _load(cfg)
    out = _outdir(cfg)
    rows, result_json = [], {}
    for mode in ("spline", "multiscale"):
        model = replace(cfg.model_config(), mode=mode)
        _, _, blocks, _, _ = pipeline.prepare_blocks(dataset, model)
        fracs, hist = _block_stats(blocks)
        result = pipeline.run_full(dataset, model)
        entry = {
            "mode": mode,
            "timings": result.timings,
            "nonzero_fraction_per_block": fracs,
            "entry_magnitude_histogram": {
                "bin_edges": _HIST_BINS,
                "counts": [int(c) for c in hist],
            },
            "selected_sensors": [k + 1 for k in result.fit.selected],
            "cv_mse": result.fit.cv_mse,
        }
        result_json[mode] = entry
        rows.append(entry)
    _write_json(os.path.join(out, "bench.json"), result_json)
    with open(os.path.join(out, "bench.csv"), "w", encoding="utf-8") as fh:
        fh.write("mode,assembly_s,selection_s,estimation_s,mean_nnz_fraction,cv_mse\n")
        for e in rows:
            t = e["timings"]
            fh.write(f"{e['mode']},{t['assembly']:.3f},{t['selection']:.3f},"
                     f"{t['estimation']:.3f},{np.mean(e['nonzero_fraction_per_block']):.6f},"
                     f"{e['cv_mse']:.10g}\n")
    io.write_manifest(os.path.join(out, "bench_manifest.json"), cfg,
                      [cfg.signals_path, cfg.positions_path])
    ratio = result_json["multiscale"]["timings"]["selection"] / max(
        result_json["spline"]["timings"]["selection"], 1e-12
    )
    click.echo(json.dumps({"selection_time_ratio": ratio}))


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except _DATA_ERRORS as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except _NUMERICAL_ERRORS as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
