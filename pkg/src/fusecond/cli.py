"""Command-line surface.

Exit codes: 0 success, 2 validation error, 3 numeric error.
"""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import click

from . import voxels
from .config import MODES, load_config
from .errors import ConfigError, NumericError, ValidationError
from .pipeline import (
    inspect_run,
    render_alignment_summary,
    render_report,
    run_alignment_stages,
    run_pipeline,
    write_alignment_artifacts,
)
from .selftest import run_selftest

EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def _parse_lambda_overrides(pairs: tuple[str, ...]) -> dict[str, float]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--lambda expects <source>=<value>, got {pair!r}")
        name, value = pair.split("=", 1)
        try:
            out[name.strip()] = float(value)
        except ValueError as exc:
            raise ConfigError(f"--lambda value must be a number, got {value!r}") from exc
    return out


def _apply_overrides(cfg, mode, seed, beta, lambdas, threads):
    if mode is not None:
        cfg = replace(cfg, mode=mode)
    if beta is not None:
        cfg = replace(cfg, beta=beta)
    if lambdas:
        cfg = replace(cfg, lambda_overrides={**cfg.lambda_overrides, **lambdas})
    if threads is not None:
        cfg = replace(cfg, threads=threads)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


@click.group()
def cli():
    """Multi-image conditioning pipeline over sparse voxel latents."""


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(MODES), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--lambda", "lambdas", multiple=True, help="<source>=<value>, repeatable")
@click.option("--beta", type=float, default=None)
@click.option("--threads", type=int, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def generate(config_path, mode, seed, lambdas, beta, threads, out_dir):
    """Run the full pipeline and write run artifacts."""
    cfg = load_config(config_path)
    cfg = _apply_overrides(cfg, mode, seed, beta, _parse_lambda_overrides(lambdas), threads)
    artifacts = run_pipeline(cfg, out_dir)
    click.echo(
        f"generated {artifacts.final.count} voxels "
        f"({artifacts.final.channels} channels) -> {out_dir}"
    )


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def align(config_path, seed, threads, out_dir):
    """Run encoding + bidirectional alignment only; report statistics."""
    cfg = load_config(config_path)
    cfg = _apply_overrides(cfg, None, seed, None, {}, threads)
    stages = run_alignment_stages(cfg)
    write_alignment_artifacts(stages, cfg, Path(out_dir))
    click.echo(render_alignment_summary(stages))


@cli.command()
@click.argument("artifacts_dir", type=click.Path())
def inspect(artifacts_dir):
    """Summarize a run directory and spot-check its invariants."""
    report = inspect_run(artifacts_dir)
    click.echo(render_report(report))
    if not all(report["checks"].values()):
        raise NumericError("invariant spot-check failed")


@cli.command()
def selftest():
    """Run the built-in oracle-equivalence suite."""
    click.echo(f"voxel kernel backend: {voxels.KERNEL_BACKEND}")
    results = run_selftest()
    failed = False
    for name, ok in results:
        click.echo(f"{'PASS' if ok else 'FAIL'}  {name}")
        failed = failed or not ok
    if failed:
        raise NumericError("selftest failed")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_VALIDATION)
    except click.exceptions.Abort:
        sys.exit(EXIT_VALIDATION)
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    except NumericError as exc:
        click.echo(f"numeric error: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)


if __name__ == "__main__":
    main()
