"""Command-line entry point: ``kdvcorr run | list-experiments | validate``."""
from __future__ import annotations

import sys

import click

from .errors import ConfigError, SolverAbort
from .experiments import list_experiments, load_config, render_summary, run as run_experiment

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


@click.group()
def main() -> None:
    """Run the modulation-approximation experiments."""


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="TOML configuration file.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory (overrides the config).")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Worker processes for eps ladders.")
def run_cmd(config_path: str, out: str | None, jobs: int) -> None:
    """Run one experiment and exit 0 on pass, 1 on failure."""
    try:
        config = load_config(config_path)
        manifest = run_experiment(config, out, jobs)
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_CONFIG)
    except SolverAbort as exc:
        click.echo(f"solver abort: {exc}", err=True)
        sys.exit(EXIT_ABORT)
    click.echo(render_summary(manifest), nl=False)
    sys.exit(EXIT_PASS if manifest.passed else EXIT_FAIL)


@main.command("list-experiments")
def list_cmd() -> None:
    """Show the registered experiments."""
    for exp in list_experiments():
        click.echo(f"{exp.name:24s} {exp.summary}")


@main.command("validate")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
def validate_cmd(config_path: str) -> None:
    """Check a configuration without running it."""
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(f"ok: {config.experiment} (config hash {config.digest()[:12]})")


if __name__ == "__main__":
    main()
