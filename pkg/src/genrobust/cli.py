"""Command-line entry point: ``genrobust <verb> --config cfg.yaml --out runs/x``.

Verbs run one stage each against an output directory. When ``--config`` is
omitted the config recorded in ``<out>/manifest.json`` is reused.
"""
from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import torch

from .config import load_config
from .errors import ConfigurationError, DatasetLoadError, NumericError, TrainingDiverged
from . import pipeline

EXIT_CODES = [(ConfigurationError, 2), (DatasetLoadError, 3), (NumericError, 4), (TrainingDiverged, 4),
              (FileNotFoundError, 5)]


def _experiment(config, out, seed, device) -> pipeline.Experiment:
    if config is None:
        if out is None or not (Path(out) / "manifest.json").is_file():
            raise ConfigurationError("pass --config, or --out pointing at a run with a manifest.json")
        config = Path(out) / "manifest.json"
    cfg = load_config(config)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if device.startswith("cuda") and not torch.cuda.is_available():
        raise ConfigurationError(f"device {device!r} requested but CUDA is not available")
    return pipeline.Experiment(cfg, out, device)


def _run(stage, fn):
    try:
        return fn()
    except click.ClickException:
        raise
    except Exception as exc:  # noqa: BLE001 - mapped to a stage-tagged exit
        stage = getattr(exc, "stage", stage)
        code = next((c for t, c in EXIT_CODES if isinstance(exc, t)), 1)
        click.echo(f"error [{stage}]: {type(exc).__name__}: {exc}", err=True)
        logging.getLogger(__name__).debug("traceback", exc_info=True)
        sys.exit(code)


def common(f):
    f = click.option("--device", default="cpu", show_default=True, help="torch device, e.g. cpu or cuda:0")(f)
    f = click.option("--jobs", default=1, show_default=True, type=click.IntRange(1), help="parallel head jobs")(f)
    f = click.option("--resume", is_flag=True, help="continue from checkpoints in the output directory")(f)
    f = click.option("--seed", type=int, default=None, help="override the experiment seed")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default=None, help="output directory")(f)
    f = click.option("--config", type=click.Path(dir_okay=False), default=None, help="YAML config or manifest.json")(f)
    return f


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose):
    """Generative robust classifiers: train, calibrate, evaluate, interpret, ablate, report."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))


@main.command()
@common
@click.option("--which", type=click.Choice(["all", "heads", "baseline"]), default="all", show_default=True)
@click.option("--classes", default=None, help="comma-separated head indices to train")
def train(config, out, seed, resume, jobs, device, which, classes):
    """Train the K binary heads and the softmax baseline."""
    ks = [int(c) for c in classes.split(",")] if classes else None
    m = _run("train", lambda: pipeline.cmd_train(_experiment(config, out, seed, device), which, resume, jobs, ks))
    st = m.data["stages"]["train"]
    click.echo(f"train: {st['status']} ({len(st['artifacts'])} selections)")
    if st.get("errors"):
        for k, v in st["errors"].items():
            click.echo(f"error [train:{k}]: {v}", err=True)
        sys.exit(6)


@main.command("calibrate")
@common
def calibrate_cmd(config, out, seed, resume, jobs, device):
    """Fit the per-class offsets on the calibration split."""
    rec = _run("calibrate", lambda: pipeline.cmd_calibrate(_experiment(config, out, seed, device)))
    click.echo("calibration: " + " ".join(f"{c:+.4f}" for c in rec["calib"]))
    click.echo(f"val CE {rec['val_ce_before']:.4f} -> {rec['val_ce_after']:.4f}")


@main.command("eval")
@common
def eval_cmd(config, out, seed, resume, jobs, device):
    """Standard and robust accuracy plus epsilon sweeps."""
    reports = _run("eval", lambda: pipeline.cmd_eval(_experiment(config, out, seed, device)))
    for name, r in reports.items():
        robust = ", ".join(f"{k} {v:.4f}" for k, v in r["robust_accuracy"].items())
        click.echo(f"{name}: standard {r['standard_accuracy']:.4f}; {robust}")


@main.command()
@common
@click.option("--mode", type=click.Choice(["generate", "counterfactual", "both"]), default="both", show_default=True)
def interpret(config, out, seed, resume, jobs, device, mode):
    """Class-conditional samples and counterfactuals with FID."""
    modes = ("generate", "counterfactual") if mode == "both" else (mode,)
    rows = _run("interpret", lambda: pipeline.cmd_interpret(_experiment(config, out, seed, device), modes))
    for r in rows:
        click.echo(f"{r['mode']} {r['attack']} {r['model']} class {r['class']}: FID {r['fid_output']:.3f} "
                   f"(seeds {r['fid_reference']:.3f})")


@main.command()
@common
@click.option("--axis", default=None, help="ablation axis (overrides the config)")
@click.option("--values", default=None, help="comma-separated axis values (overrides the config)")
def ablate(config, out, seed, resume, jobs, device, axis, values):
    """Train single heads along one ablation axis."""
    vals = values.split(",") if values else None
    rows = _run(f"ablate:{axis or 'config'}",
                lambda: pipeline.cmd_ablate(_experiment(config, out, seed, device), axis, vals))
    for r in rows:
        click.echo(", ".join(f"{k}={v}" for k, v in r.items()))


@main.command()
@common
def report(config, out, seed, resume, jobs, device):
    """Summarize a run directory."""
    click.echo(_run("report", lambda: pipeline.cmd_report(_experiment(config, out, seed, device))), nl=False)


if __name__ == "__main__":
    main()
