"""Command-line front end: ``amogp generate | train | predict``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical abort.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import ConfigError, load_run_config
from .data import SyntheticSpec, generate_artificial, read_dataset_csv, write_dataset_csv, write_truth_csv
from .model import build_model, decompose, load_model, predict, sample_functions, save_model, test_log_likelihood
from .training import NumericalAbort, fit

PRODUCER = f"amogp {__version__}"
EXIT_NUMERICAL = 3


def _interval(ctx, param, value):
    if value is None:
        return None
    try:
        lo, hi = (float(v) for v in value.split(":"))
    except ValueError:
        raise click.BadParameter("expected LO:HI", ctx, param)
    if not 0.0 <= lo < hi <= 1.0:
        raise click.BadParameter(f"interval {value} must satisfy 0 <= LO < HI <= 1", ctx, param)
    return (lo, hi)


def _frequency(ctx, param, value):
    try:
        if value.strip().endswith("pi"):
            return float(value.strip()[:-2] or 1) * np.pi
        return float(value)
    except ValueError:
        raise click.BadParameter("expected a number, optionally suffixed with 'pi' (e.g. 10pi)", ctx, param)


@click.group()
@click.version_option(__version__, prog_name="amogp")
def main():
    """Aligned multi-output Gaussian processes."""


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--n-points", type=click.IntRange(min=10), default=500, show_default=True, help="Points per output.")
@click.option("--noise-sd", type=click.FloatRange(min=0.0), default=0.05, show_default=True)
@click.option("--gap1", callback=_interval, default="0.7:0.8", show_default=True, help="Held-out interval of output 0.")
@click.option("--gap2", callback=_interval, default="0.35:0.65", show_default=True, help="Held-out interval of output 1.")
@click.option("--decay", type=float, default=2.0, show_default=True)
@click.option("--frequency", callback=_frequency, default="6pi", show_default=True)
@click.option("--slope", type=float, default=4.0, show_default=True, help="Sigmoid slope of output 0.")
def generate(seed, out_dir, n_points, noise_sd, gap1, gap2, decay, frequency, slope):
    """Write the synthetic two-output dataset and its ground truth."""
    spec = SyntheticSpec(n_points, noise_sd, gap1, gap2, seed, decay, frequency, slope)
    data, truth = generate_artificial(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(data, out / "dataset.csv", PRODUCER)
    write_truth_csv(truth, out / "truth.csv", PRODUCER)
    click.echo(f"wrote {out / 'dataset.csv'} and {out / 'truth.csv'}")


def _load_data(cfg):
    if cfg.data_path is not None:
        return read_dataset_csv(cfg.data_path, cfg.extra["n_outputs"])
    data, _ = generate_artificial(cfg.synthetic)
    return data


@main.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--max-steps", type=click.IntRange(min=0), default=None, help="Override train.max_steps.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Override output_dir.")
def train(config_path, max_steps, out_dir):
    """Fit every model listed in CONFIG_PATH and write models, traces and metrics."""
    if not Path(config_path).is_file():
        raise click.UsageError(f"config file {config_path} does not exist")
    try:
        cfg = load_run_config(config_path)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    if cfg.data_path is not None and not cfg.data_path.is_file():
        raise click.UsageError(f"data file {cfg.data_path} does not exist")
    try:
        data = _load_data(cfg)
    except ValueError as exc:
        raise click.UsageError(f"cannot read data: {exc}")
    if data.n_outputs != cfg.extra["n_outputs"]:
        raise click.UsageError(f"data has {data.n_outputs} outputs, config expects {cfg.extra['n_outputs']}")
    train_cfg = cfg.train
    if max_steps is not None:
        from dataclasses import replace

        train_cfg = replace(train_cfg, max_steps=max_steps)
    out = Path(out_dir) if out_dir else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)

    metrics = {"producer": PRODUCER, "models": {}}
    for entry in cfg.models:
        click.echo(f"training {entry.name}")
        model = build_model(data, entry.layout, cfg.init)
        try:
            model, trace = fit(model, data, train_cfg)
        except NumericalAbort as exc:
            if exc.model is not None:
                save_model(exc.model, out / f"{entry.name}.last_finite.model.json", PRODUCER)
            click.echo(f"numerical abort in {entry.name}: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)
        save_model(model, out / f"{entry.name}.model.json", PRODUCER)
        trace.to_csv(out / f"{entry.name}.trace.csv", f"generated by {PRODUCER}")
        tll = {}
        for d in range(data.n_outputs):
            if np.any(data.test_masks[d]):
                tll[f"output_{d}"] = test_log_likelihood(model, data, d)
        metrics["models"][entry.name] = {
            "test_log_likelihood": tll,
            "final_elbo": trace.elbo[-1] if len(trace) else None,
            "steps": len(trace),
        }
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=1)
        fh.write("\n")
    click.echo(json.dumps(metrics["models"], indent=1))


def _grid(ctx, param, value):
    if value is None:
        return None
    try:
        lo, hi, n = value.split(":")
        return np.linspace(float(lo), float(hi), int(n))
    except ValueError:
        raise click.BadParameter("expected LO:HI:N", ctx, param)


def _read_inputs(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    if not rows or "x" not in rows[0]:
        raise click.UsageError(f"{path}: needs an 'x' column")
    return np.array([float(r["x"]) for r in rows])


@main.command(name="predict")
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--output", "d", type=int, default=0, show_default=True, help="Output index.")
@click.option("--grid", callback=_grid, default=None, help="Evaluate on LO:HI:N.")
@click.option("--inputs", "inputs_path", type=click.Path(exists=True, dir_okay=False), default=None, help="CSV with an x column.")
@click.option("--decompose", "do_decompose", is_flag=True, help="Emit per-layer moments.")
@click.option("--samples", type=click.IntRange(min=0), default=0, show_default=True, help="Number of noiseless sample paths.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def predict_cmd(model_path, d, grid, inputs_path, do_decompose, samples, seed, out_path):
    """Write predictive moments (and optional samples) as CSV.

    Final-output variances include observation noise; samples do not.
    """
    if (grid is None) == (inputs_path is None):
        raise click.UsageError("give exactly one of --grid or --inputs")
    try:
        model = load_model(model_path)
    except (ValueError, KeyError) as exc:
        raise click.UsageError(f"cannot load model: {exc}")
    if not 0 <= d < model.n_outputs:
        raise click.BadParameter(f"output index must be in [0, {model.n_outputs})", param_hint="--output")
    x = grid if grid is not None else _read_inputs(inputs_path)
    if not np.all(np.isfinite(x)):
        raise click.UsageError("inputs must be finite")
    if samples and np.any(np.diff(x) < 0):
        raise click.UsageError("sampling needs sorted inputs")
    with open(out_path, "w", newline="") as fh:
        fh.write(f"# generated by {PRODUCER}\n")
        w = csv.writer(fh)
        if do_decompose:
            dec = decompose(model, x, d)
            w.writerow(["x", "layer", "mean", "variance"])
            for name, q in zip(dec._fields, dec):
                for xi, m, v in zip(x, np.asarray(q.mean), np.asarray(q.var)):
                    w.writerow([repr(float(xi)), name, repr(float(m)), repr(float(v))])
        else:
            _, noisy = predict(model, x, d)
            paths = sample_functions(model, x, d, samples, seed) if samples else np.zeros((0, len(x)))
            w.writerow(["x", "mean", "variance"] + [f"sample_{i}" for i in range(samples)])
            for j, xi in enumerate(x):
                row = [repr(float(xi)), repr(float(noisy.mean[j])), repr(float(noisy.var[j]))]
                w.writerow(row + [repr(float(v)) for v in paths[:, j]])
    click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
