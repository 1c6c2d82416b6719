"""``ircsim`` command line."""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import harness
from .fixtures import make_dataset, make_models
from .model import save_model
from .nonideal import NonidealConfig


def _floats(text: str | None) -> tuple:
    if text is None or not text.strip():
        return ()
    return tuple(float(t) for t in text.split(","))


def _seeds(text: str | None) -> tuple:
    if text is None:
        return harness.DEFAULT_SEEDS
    text = text.strip()
    if ".." in text:
        a, _, b = text.partition("..")
        return tuple(range(int(a), int(b) + 1))
    return tuple(int(t) for t in text.split(",") if t.strip())


def _spec(model, data, config, seeds, mode, style, out, calib_data=None, bias_table=None, workers=1):
    return harness.ExperimentSpec(
        model=Path(model) if model else None, data=Path(data) if data else None,
        config=Path(config) if config else None, seeds=_seeds(seeds), mode=mode, style=style,
        out=Path(out), calib_data=Path(calib_data) if calib_data else None,
        bias_table=Path(bias_table) if bias_table else None, workers=workers)


def _done(report: dict, paths: list, summary: str) -> None:
    click.echo(summary)
    for p in paths:
        click.echo(f"wrote {p}")


def common(f):
    opts = [
        click.option("--model", type=click.Path(exists=True, dir_okay=False), help="Model file."),
        click.option("--data", type=click.Path(exists=True, dir_okay=False), help="Dataset file."),
        click.option("--config", type=click.Path(exists=True, dir_okay=False), help="Nonideality config (JSON)."),
        click.option("--seeds", default=None, help="Comma list or a..b range (default 0..9)."),
        click.option("--mode", default=None, help="single-shot or partial-sum:k (default by style)."),
        click.option("--style", type=click.Choice(["baseline", "proposed"]), default=None,
                     help="Expected model style; mismatch is an error."),
        click.option("--out", default="reports", show_default=True, type=click.Path(file_okay=False),
                     help="Report directory (files are never overwritten)."),
        click.option("--bias-table", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="Extra-bias table from `calibrate`."),
        click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1),
                     help="Worker processes for seeds."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


@click.group()
def main():
    """In-RRAM computing nonideality simulator."""


@main.command()
@common
def simulate(model, data, config, seeds, mode, style, out, bias_table, workers):
    """Monte-Carlo accuracy over seeds."""
    spec = _spec(model, data, config, seeds, mode, style, out, bias_table=bias_table, workers=workers)
    rep, paths = harness.cmd_simulate(spec)
    line = f"accuracy {rep['accuracy_mean']:.4f}"
    if "accuracy_std" in rep:
        line += f" +- {rep['accuracy_std']:.4f}"
    _done(rep, paths, f"{line} (ideal {rep['ideal_accuracy']:.4f}, {len(rep['seeds'])} seeds)")


@main.command("sweep-wl")
@common
@click.option("--voltages", default=None, help="Comma list of word-line voltages from the config table.")
@click.option("--sigmas", default=None, help="Comma list of device sigma values.")
def sweep_wl(model, data, config, seeds, mode, style, out, bias_table, workers, voltages, sigmas):
    """Word-line voltage / device sigma sweep."""
    spec = _spec(model, data, config, seeds, mode, style, out, bias_table=bias_table, workers=workers)
    rep, paths = harness.cmd_sweep_wl(spec, _floats(voltages), _floats(sigmas))
    _done(rep, paths, f"{len(rep['points'])} sweep points")


@main.command()
@common
@click.option("--extras", default="1,2,3", show_default=True, help="Comma list of sa_margin_extra values.")
def tolerance(model, data, config, seeds, mode, style, out, bias_table, workers, extras):
    """SA sensing-variation tolerance sweep."""
    spec = _spec(model, data, config, seeds, mode, style, out, bias_table=bias_table, workers=workers)
    rep, paths = harness.cmd_tolerance(spec, _floats(extras))
    _done(rep, paths, " ".join(f"+{p['sa_margin_extra']:g}:{p['accuracy_mean']:.4f}" for p in rep["points"]))


@main.command()
@common
@click.option("--calib-data", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Calibration split (defaults to --data).")
def calibrate(model, data, config, seeds, mode, style, out, bias_table, workers, calib_data):
    """Choose per-layer extra bias on the calibration split.

    Runs once with the config seed; --seeds is ignored here.
    """
    spec = _spec(model, data or calib_data, config, seeds, mode, style, out, calib_data=calib_data)
    rep, paths = harness.cmd_calibrate(spec)
    _done(rep, paths, "biases " + json.dumps(rep["biases"], sort_keys=True))


@main.command("irdrop-validate")
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--cases", default=1000, show_default=True, type=click.IntRange(min=0))
@click.option("--out", default="reports", show_default=True, type=click.Path(file_okay=False))
def irdrop_validate(config, cases, out):
    """Block IR-drop model against the exact ladder solver."""
    spec = harness.ExperimentSpec(config=Path(config) if config else None, out=Path(out))
    rep, paths = harness.cmd_irdrop_validate(spec, cases)
    _done(rep, paths, f"p95 {rep['percentiles']['p95']:.4%}  max {rep['max']:.4%}  "
                      f"within 1%: {rep['frac_within_1pct']:.1%}")


@main.command("make-fixture")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
def make_fixture(out, seed):
    """Write the desk-scale dataset splits, both model styles and a default config."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    targets = {n: out / n for n in ("train.ircdata", "calib.ircdata", "test.ircdata", "proposed.ircmodel",
                                    "baseline.ircmodel", "config.json")}
    clash = [str(p) for p in targets.values() if p.exists()]
    if clash:
        raise click.ClickException(f"refusing to overwrite {', '.join(clash)}")
    train, calib, test = make_dataset(seed)
    proposed, baseline = make_models(train, seed)
    train.save(targets["train.ircdata"])
    calib.save(targets["calib.ircdata"])
    test.save(targets["test.ircdata"])
    save_model(proposed, targets["proposed.ircmodel"])
    save_model(baseline, targets["baseline.ircmodel"])
    NonidealConfig(seed=seed).save(targets["config.json"])
    for p in targets.values():
        click.echo(f"wrote {p}")


def run() -> None:
    try:
        main(standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        sys.exit(1)
    except click.ClickException as e:
        e.show()
        sys.exit(e.exit_code or 2)
    except (OSError, ValueError, KeyError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    run()
