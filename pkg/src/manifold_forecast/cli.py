"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

import json
import logging
import os
import sys
import time

import click
import numpy as np
import yaml

from . import __version__
from . import embedding as emb
from . import forex as fx
from . import lifting as lift
from . import pipeline as pl
from . import serialization
from .errors import ConfigError, DataError, NumericalError
from .synthdata import GENERATORS, TimeSeriesPanel, get_generator

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("manifold_forecast")


class _Timer:
    def __init__(self):
        self.stages = {}

    def stage(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = round(time.perf_counter() - self.t0, 6)

        return _Ctx()


def _prepare_out(out_dir):
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise click.UsageError(f"cannot create output directory {out_dir}: {exc}") from None
    if not os.access(out_dir, os.W_OK):
        raise click.UsageError(f"output directory {out_dir} is not writable")
    return out_dir


def _write_manifest(out_dir, command, config_path, config, seed, timer, outputs):
    manifest = {
        "command": command,
        "config_path": config_path,
        "config": config,
        "seed": seed,
        "version": __version__,
        "output_dir": os.path.abspath(out_dir),
        "timings_seconds": timer.stages,
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def cli(verbose):
    """Embed-forecast-lift toolkit for high-dimensional time series."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
def version():
    """Print the package version."""
    click.echo(__version__)


@cli.command()
@click.option("--model", type=click.Choice(sorted(GENERATORS)), default=None,
              help="Generator; defaults to the preset's own.")
@click.option("--preset", type=click.Choice(pl.PRESETS), default=None, help="Bundled table definition.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Custom experiment YAML (instead of --preset).")
@click.option("--runs", type=click.IntRange(min=1), default=None, help="Monte-Carlo runs (default from config).")
@click.option("--seed", type=int, default=None, help="Base seed; run r uses seed + r.")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Worker processes.")
@click.option("--failure-policy", type=click.Choice(pl.FAILURE_POLICIES), default="propagate", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def synth(model, preset, config_path, runs, seed, jobs, failure_policy, out_dir):
    """Monte-Carlo RMSE table on a synthetic model."""
    if (preset is None) == (config_path is None):
        raise click.UsageError("give exactly one of --preset or --config")
    timer = _Timer()
    with timer.stage("load_config"):
        experiment = pl.load_preset(preset) if preset else pl.load_experiment(config_path)
        if model is not None and model != experiment.generator:
            experiment = pl.Experiment(experiment.name, model, experiment.configs, experiment.n_runs,
                                       experiment.base_seed, experiment.n_obs)
    _prepare_out(out_dir)
    n_runs = experiment.n_runs if runs is None else runs
    base_seed = experiment.base_seed if seed is None else seed
    with timer.stage("monte_carlo"):
        table = pl.run_experiment(experiment, n_runs=n_runs, base_seed=base_seed, jobs=jobs,
                                  failure_policy=failure_policy)
    with timer.stage("write"):
        csv_path = os.path.join(out_dir, "rmse_table.csv")
        txt_path = os.path.join(out_dir, "rmse_table.txt")
        table.to_csv(csv_path)
        with open(txt_path, "w") as fh:
            fh.write(table.to_text())
    resolved = {
        "name": experiment.name,
        "generator": experiment.generator,
        "n_runs": n_runs,
        "base_seed": base_seed,
        "n_obs": experiment.n_obs,
        "failure_policy": failure_policy,
        "configs": [c.to_dict() for c in experiment.configs],
    }
    _write_manifest(out_dir, "synth", config_path or f"preset:{preset}", resolved, base_seed, timer,
                    [csv_path, txt_path])
    click.echo(table.to_text(), nl=False)
    dead = [r.name for r in table.rows if r.n_success == 0]
    if table.total_failures:
        click.echo(f"{table.total_failures} failed run(s):", err=True)
        for r in table.rows:
            if r.failures:
                click.echo(f"  {r.name}: {r.failures}", err=True)
    if dead:
        click.echo(f"no successful run for: {', '.join(dead)}", err=True)
        sys.exit(EXIT_NUMERIC)


def _slug(name):
    return "".join(c if c.isalnum() else "_" for c in name).strip("_")


@cli.command()
@click.option("--prices", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Prices CSV (date,pair,close); bundled fixture by default.")
@click.option("--rates", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Rates CSV (date,region,annual_rate_percent); bundled fixture by default.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Backtest YAML with 'defaults' and 'variants'.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--audit/--no-audit", default=False, help="Re-run every day with the future hidden.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def forex(prices, rates, config_path, seed, audit, out_dir):
    """Rolling risk-parity FX backtest for every configured strategy variant."""
    if (prices is None) != (rates is None):
        raise click.UsageError("give both --prices and --rates, or neither")
    if prices is None:
        prices, rates = fx.fixture_paths()
    timer = _Timer()
    basis = 365.0
    with timer.stage("load_config"):
        if config_path:
            try:
                with open(config_path) as fh:
                    raw = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{config_path}: {exc}") from None
            variants = fx.variants_from_dict(raw)
            seed = int(raw.get("seed", seed))
            basis = float(raw.get("basis", basis))
        else:
            variants = fx.default_variants()
    with timer.stage("load_data"):
        data = fx.load_dataset(prices, rates, basis=basis)
    _prepare_out(out_dir)
    ledgers, outputs = [], []
    for cfg in variants:
        with timer.stage(f"backtest:{cfg.name}"):
            ledger = fx.run_backtest(data, cfg, seed=seed, audit=audit)
        path = os.path.join(out_dir, f"ledger_{_slug(cfg.name)}.csv")
        ledger.to_csv(path)
        outputs.append(path)
        ledgers.append(ledger)
        click.echo(f"{cfg.name:<24} SH {ledger.sharpe: .4f}  days {ledger.portfolio.size}"
                   + (f"  failed days {len(ledger.failures)}" if ledger.failures else ""))
    summary = os.path.join(out_dir, "sharpe_summary.json")
    fx.write_summary(ledgers, summary)
    outputs.append(summary)
    _write_manifest(out_dir, "forex", config_path, {
        "prices": os.path.abspath(prices), "rates": os.path.abspath(rates), "basis": basis,
        "audit": audit, "variants": [c.to_dict() for c in variants],
    }, seed, timer, outputs)


def _read_panel(path):
    try:
        return TimeSeriesPanel.from_csv(path)
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: {exc}") from None


@cli.command()
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Panel CSV: header of variable names, one row per time step.")
@click.option("--method", type=click.Choice(["dm", "lle", "pca"]), default="dm", show_default=True)
@click.option("--d", "d", type=int, default=2, show_default=True, help="Number of coordinates.")
@click.option("--t", "t", type=int, default=1, show_default=True, help="Diffusion time (dm).")
@click.option("--sigma", type=float, default=None, help="Kernel scale (dm); auto by default.")
@click.option("--parsimonious/--no-parsimonious", default=True, show_default=True)
@click.option("--k", "k", type=int, default=None,
              help="Neighbors (lle); number of variables, at least d + 1, by default.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def embed(input_path, method, d, t, sigma, parsimonious, k, out_dir):
    """Embed a panel; writes coords.csv and an embedding.json sidecar."""
    if d < 1:
        raise click.UsageError("--d must be a positive integer")
    timer = _Timer()
    with timer.stage("read"):
        panel = _read_panel(input_path)
    _prepare_out(out_dir)
    with timer.stage("embed"):
        try:
            if method == "dm":
                e = emb.dm_embed(panel.values, d, t=t, sigma=sigma, parsimonious=parsimonious)
            elif method == "lle":
                k = max(panel.n_vars, d + 1) if k is None else k
                e = emb.lle_embed(panel.values, d, k)
            else:
                e = emb.pca_embed(panel.values, d)
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise click.UsageError(str(exc)) from None
    coords_path = os.path.join(out_dir, "coords.csv")
    meta_path = os.path.join(out_dir, "embedding.json")
    TimeSeriesPanel(e.coords, tuple(f"c{i + 1}" for i in range(e.coords.shape[0])), panel.start_index
                    ).to_csv(coords_path)
    serialization.save(e, meta_path, extra={"method": method, "source": os.path.abspath(input_path)})
    config = {"input": os.path.abspath(input_path), "method": method, "d": d, "t": t, "sigma": sigma,
              "parsimonious": parsimonious, "k": k}
    _write_manifest(out_dir, "embed", None, config, None, timer, [coords_path, meta_path])
    click.echo(f"wrote {e.coords.shape[0]} x {e.coords.shape[1]} coordinates to {coords_path}")


@cli.command("lift")
@click.option("--reference-coords", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Embedded reference coordinates CSV (e.g. coords.csv from 'embed').")
@click.option("--reference-panel", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Ambient reference panel CSV, same number of rows.")
@click.option("--points", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Embedded points to lift, same columns as the reference coordinates.")
@click.option("--method", type=click.Choice(["gh", "rbf"]), default="gh", show_default=True)
@click.option("--k", "k", type=int, default=50, show_default=True, help="Neighbors (rbf).")
@click.option("--p", "p", type=int, default=1, show_default=True, help="Odd radial power (rbf).")
@click.option("--q", "q", type=int, default=None, help="Harmonics kept (gh); embedded dimension + 1 by default.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def lift_cmd(reference_coords, reference_panel, points, method, k, p, q, out_dir):
    """Lift embedded points back to the ambient space."""
    timer = _Timer()
    with timer.stage("read"):
        ref_y = _read_panel(reference_coords)
        ref_x = _read_panel(reference_panel)
        pts = _read_panel(points)
    if ref_y.n_obs != ref_x.n_obs:
        raise DataError("reference coordinates and panel have different numbers of rows")
    if pts.n_vars != ref_y.n_vars:
        raise DataError("points and reference coordinates have different columns")
    _prepare_out(out_dir)
    with timer.stage("lift"):
        try:
            if method == "gh":
                op = lift.gh_fit(ref_y.values, ref_x.values, q=q)
                X = lift.gh_extend_batch(op, pts.values)
            else:
                op = lift.rbf_fit(ref_y.values, ref_x.values, k=k, p=p)
                X = lift.rbf_lift_batch(op, pts.values)
        except ValueError as exc:
            raise click.UsageError(str(exc)) from None
    out_path = os.path.join(out_dir, "lifted.csv")
    op_path = os.path.join(out_dir, "operator.json")
    TimeSeriesPanel(X, ref_x.variable_names).to_csv(out_path)
    serialization.save(op, op_path, extra={"method": method})
    config = {"reference_coords": os.path.abspath(reference_coords),
              "reference_panel": os.path.abspath(reference_panel), "points": os.path.abspath(points),
              "method": method, "k": k, "p": p, "q": q}
    _write_manifest(out_dir, "lift", None, config, None, timer, [out_path, op_path])
    click.echo(f"lifted {X.shape[1]} point(s) to {out_path}")


@cli.command()
@click.option("--model", type=click.Choice(sorted(GENERATORS)), required=True)
@click.option("--n", "n", type=click.IntRange(min=4), default=2000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--burn-in", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def generate(model, n, seed, burn_in, out_path):
    """Write one synthetic panel as CSV."""
    panel = get_generator(model)(n, seed, burn_in=burn_in)
    panel.to_csv(out_path)
    click.echo(f"wrote {panel.n_vars} x {panel.n_obs} panel to {out_path}")


@cli.command("forex-fixture")
@click.option("--days", type=click.IntRange(min=260), default=320, show_default=True)
@click.option("--seed", type=int, default=2024, show_default=True)
@click.option("--momentum", type=float, default=0.35, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def forex_fixture(days, seed, momentum, out_dir):
    """Write a synthetic FX prices/rates pair (the bundled fixture uses the defaults)."""
    _prepare_out(out_dir)
    fx.write_fixture(os.path.join(out_dir, "fx_prices.csv"), os.path.join(out_dir, "fx_rates.csv"),
                     n_days=days, seed=seed, momentum=momentum)
    click.echo(f"wrote fixture to {out_dir}")


def main(argv=None):
    """Entry point mapping exceptions onto the documented exit codes."""
    try:
        cli.main(args=argv, prog_name="manifold-forecast", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except (click.UsageError, click.BadParameter) as exc:
        exc.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return EXIT_USAGE
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERIC
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
