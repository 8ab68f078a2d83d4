"""Click CLI entry point for ahdc-lab."""

from __future__ import annotations

import functools
import json
import sys
from collections.abc import Callable

import click

from ahdc_lab import __version__
from ahdc_lab.config import ABLATIONS

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_INTERRUPTED = 130


def _fail(error: str, message: str, exit_code: int) -> None:
    click.echo(json.dumps({"error": error, "message": message, "exit_code": exit_code}), err=True)
    sys.exit(exit_code)


class ExperimentGroup(click.Group):
    """Group that reports every failure as one JSON line on stderr and maps it to an exit code."""

    def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False
        try:
            rv = super().main(*args, **kwargs)
        except click.Abort:
            _fail("KeyboardInterrupt", "interrupted", EXIT_INTERRUPTED)
        except click.ClickException as e:
            _fail(type(e).__name__, e.format_message(), EXIT_VALIDATION)
        except (ValueError, FileNotFoundError) as e:
            _fail(type(e).__name__, str(e), EXIT_VALIDATION)
        except Exception as e:
            _fail(type(e).__name__, str(e), EXIT_RUNTIME)
        sys.exit(rv if isinstance(rv, int) else EXIT_OK)


def experiment_options(fn: Callable) -> Callable:
    """--config, --force, --seed, --out and the ablation switches shared by every stage command."""
    for flag in reversed(list(ABLATIONS)):
        fn = click.option(f"--{flag.replace('_', '-')}", flag, is_flag=True, help=f"Ablation: {flag}")(fn)
    fn = click.option("--out", "out", type=click.Path(file_okay=False), default=None, help="Override output_dir")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the experiment seed")(fn)
    fn = click.option("--force", is_flag=True, help="Overwrite existing stage outputs")(fn)
    fn = click.option(
        "-c", "--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Experiment config"
    )(fn)

    @functools.wraps(fn)
    def wrapper(config_path: str, force: bool, seed: int | None, out: str | None, **kwargs):
        from ahdc_lab.config import apply_overrides, load_config
        from ahdc_lab.logging_config import setup_logging

        ablations = [flag for flag in ABLATIONS if kwargs.pop(flag, False)]
        cfg = apply_overrides(load_config(config_path), seed=seed, output_dir=out, ablations=ablations)
        setup_logging(cfg.logging)
        return fn(cfg=cfg, force=force, **kwargs)

    return wrapper


def _pipeline(cfg, force: bool):
    from ahdc_lab.pipeline import Pipeline

    return Pipeline(cfg, force=force)


@click.group(cls=ExperimentGroup)
@click.version_option(version=__version__)
def cli():
    """ahdc-lab: adversarial domain mapping and dual-consistency segmentation experiments."""


@cli.command()
@experiment_options
def synth(cfg, force: bool):
    """Generate the two synthetic domains and the oracle pairs."""
    with _pipeline(cfg, force) as pipeline:
        pipeline.synth()


@cli.command("train-bai")
@experiment_options
@click.option("--resume", is_flag=True, help="Continue from the latest epoch checkpoint")
def train_bai(cfg, force: bool, resume: bool):
    """Train the two mapping networks and the pair discriminator."""
    with _pipeline(cfg, force) as pipeline:
        pipeline.train_bai(resume=resume)


@cli.command("build-matched")
@experiment_options
def build_matched(cfg, force: bool):
    """Adapt both domains and write the matched domains with their pairing."""
    with _pipeline(cfg, force) as pipeline:
        pipeline.build_matched()


@cli.command("train-hdc")
@experiment_options
@click.option("--resume", is_flag=True, help="Continue from the latest epoch checkpoint")
def train_hdc(cfg, force: bool, resume: bool):
    """Train the dual-modelling segmentation networks on the matched domains."""
    with _pipeline(cfg, force) as pipeline:
        pipeline.train_hdc(resume=resume)


@cli.command("eval")
@experiment_options
def evaluate(cfg, force: bool):
    """Score the test splits with DSC, Jaccard and ASD."""
    with _pipeline(cfg, force) as pipeline:
        pipeline.evaluate()


@cli.command()
@click.argument("kind", type=click.Choice(["pca", "featcorr", "divergence"]))
@experiment_options
def analyze(kind: str, cfg, force: bool):
    """Export an analysis: pca, featcorr or divergence."""
    with _pipeline(cfg, force) as pipeline:
        pipeline.analyze(kind)


@cli.command("all")
@experiment_options
def run_all(cfg, force: bool):
    """Run every stage in order."""
    with _pipeline(cfg, force) as pipeline:
        pipeline.run_all()


@cli.command()
@experiment_options
def study(cfg, force: bool):
    """Run the full pipeline over the study grid and tabulate the results."""
    from ahdc_lab.pipeline import run_study

    run_study(cfg, force=force)
