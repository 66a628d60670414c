"""Command-line front end.

Verbs: evaluate, sample-dump, synthetic, cache. Flags override the
config file. Exit codes: 0 success, 2 config error, 3 data error,
4 remote-service error, 5 synthetic check failure.
"""

from __future__ import annotations

import json
import sys
from dataclasses import replace

import click

from . import pipeline
from .config import RunConfig
from .errors import ConfigError, RewardScopeError


def _load_config(
    path: str,
    *,
    seed: int | None = None,
    output_dir: str | None = None,
    cache_dir: str | None = None,
    parallelism: int | None = None,
    no_figures: bool = False,
    lenient: bool = False,
) -> RunConfig:
    config = RunConfig.from_file(path)
    if seed is not None:
        config = replace(config, seed=seed)
    if output_dir is not None:
        config = replace(config, output_dir=output_dir)
    if cache_dir is not None:
        config = replace(config, cache_dir=cache_dir or None)
    if parallelism is not None:
        config = replace(config, parallelism=parallelism)
    if no_figures:
        config = replace(config, figures=False)
    if lenient:
        if config.dataset is None:
            raise ConfigError("--lenient needs a dataset section")
        config = replace(config, dataset=replace(config.dataset, lenient=True))
    return config


def _echo_json(payload: dict) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


def _fail(exc: RewardScopeError) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(exc.exit_code)


_shared = [
    click.option("--config", "-c", "config_path", required=True,
                 type=click.Path(exists=True, dir_okay=False),
                 help="YAML run configuration."),
    click.option("--seed", type=int, default=None, help="Override the config seed."),
    click.option("--output-dir", default=None, help="Override the output directory."),
    click.option("--cache-dir", default=None,
                 help="Override the cache directory (empty string disables caching)."),
    click.option("--parallelism", type=int, default=None,
                 help="Override request concurrency."),
    click.option("--run-id", default=None,
                 help="Fix the run directory name instead of timestamp+digest."),
    click.option("--dry-run", is_flag=True,
                 help="Validate the config and print the plan; no side effects."),
]


def shared_options(fn):
    for opt in reversed(_shared):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(package_name="rewardscope", prog_name="rewardscope")
def cli() -> None:
    """Measure how much a binary text attribute moves a reward model.

    Each response is rewritten to flip the attribute and rewritten back,
    so both sides of the comparison carry the same rewriting artifacts.
    """


@cli.command()
@shared_options
@click.option("--no-figures", is_flag=True, help="Skip figure rendering.")
@click.option("--lenient", is_flag=True, help="Skip malformed dataset lines.")
def evaluate(config_path, seed, output_dir, cache_dir, parallelism, run_id,
             dry_run, no_figures, lenient):
    """Rewrite, score, and estimate attribute effects for one dataset."""
    try:
        config = _load_config(
            config_path, seed=seed, output_dir=output_dir, cache_dir=cache_dir,
            parallelism=parallelism, no_figures=no_figures, lenient=lenient,
        )
        if dry_run:
            config.require("dataset", "instruction", "rewriter", "reward")
            _echo_json(pipeline.plan(config, "evaluate"))
            return
        result = pipeline.evaluate_run(config, run_id=run_id)
    except RewardScopeError as exc:
        _fail(exc)
    counts = result.manifest["counts"]
    click.echo(f"wrote {result.run_dir}")
    click.echo(
        f"records: loaded {counts['loaded']}, scored {counts['scored']}, "
        f"rewrite failures {counts['failed']}, cache hits {counts['cached']}"
    )
    level = config.estimator.ci_level
    click.echo(f"{'estimand':<22}{'point':>12}   {level:.0%} CI")
    for row in result.estimates:
        click.echo(
            f"{row['estimand']:<22}{row['point']:>12.6g}   "
            f"[{row['ci_low']:.6g}, {row['ci_high']:.6g}]"
        )


@cli.command(name="sample-dump")
@shared_options
@click.option("--count", "-k", type=int, required=True,
              help="How many examples to sample.")
@click.option("--no-score", is_flag=True, help="Skip reward scoring.")
def sample_dump(config_path, seed, output_dir, cache_dir, parallelism, run_id,
                dry_run, count, no_score):
    """Dump sampled rewrite triples for human inspection."""
    try:
        config = _load_config(
            config_path, seed=seed, output_dir=output_dir, cache_dir=cache_dir,
            parallelism=parallelism,
        )
        if dry_run:
            config.require("dataset", "instruction", "rewriter")
            _echo_json(pipeline.plan(config, "sample-dump", count=count))
            return
        out_path, text, warnings = pipeline.sample_dump_run(
            config, count, seed=seed, score=not no_score, run_id=run_id
        )
    except RewardScopeError as exc:
        _fail(exc)
    for w in warnings:
        click.echo(f"warning: {w}", err=True)
    click.echo(text, nl=False)
    click.echo(f"wrote {out_path}")


def _echo_unbiasedness_summary(payload: dict) -> None:
    for name, s in payload["estimands"].items():
        flag = "ok" if s["bias_ok"] else "FAIL"
        line = (
            f"[{flag}] {name}: mean bias {s['mean_bias']:+.5f} vs expected "
            f"{s['expected_bias']:+.5f} (tolerance {s['bias_tolerance']:.5f})"
        )
        if s["coverage_ok"] is not None:
            cflag = "ok" if s["coverage_ok"] else "FAIL"
            line += f"; coverage {s['coverage']:.3f} [{cflag}]"
        click.echo(line)
    scaling = payload.get("scaling")
    if scaling:
        flag = "ok" if scaling["passed"] else "FAIL"
        click.echo(
            f"[{flag}] scaling: sd ratio {scaling['ratio']:.3f} "
            f"(expected {scaling['expected_ratio']:.3f} +-20%)"
        )


@cli.command()
@shared_options
@click.option("--check", type=click.Choice(pipeline.SYNTHETIC_CHECKS),
              default="unbiasedness", show_default=True,
              help="Which report to run.")
@click.option("--no-figures", is_flag=True, help="Skip figure rendering.")
def synthetic(config_path, seed, output_dir, cache_dir, parallelism, run_id,
              dry_run, check, no_figures):
    """Ground-truth laboratory checks and correlation sweeps."""
    try:
        config = _load_config(
            config_path, seed=seed, output_dir=output_dir, cache_dir=cache_dir,
            parallelism=parallelism, no_figures=no_figures,
        )
        if dry_run:
            config.require("synthetic")
            _echo_json(pipeline.plan(config, f"synthetic:{check}"))
            return
        run_dir, payload = pipeline.synthetic_run(
            config, check, run_id=run_id, raise_on_fail=False
        )
    except RewardScopeError as exc:
        _fail(exc)
    if check == "unbiasedness":
        _echo_unbiasedness_summary(payload)
    elif check == "sweep":
        flag = "ok" if payload["passed"] else "FAIL"
        click.echo(
            f"[{flag}] double-rewrite ATE within 3 se of truth at all "
            f"{len(payload['levels'])} correlation levels"
        )
    click.echo(f"wrote {run_dir}")
    if not payload["passed"]:
        click.echo("synthetic check FAILED", err=True)
        sys.exit(5)
    click.echo("synthetic check passed")


@cli.command()
@click.argument("action", type=click.Choice(["stats", "clear", "verify"]))
@click.option("--config", "-c", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Read the cache directory from this config.")
@click.option("--cache-dir", default=None, help="Cache directory to operate on.")
def cache(action, config_path, cache_dir):
    """Inspect or maintain the on-disk rewrite/score cache.

    `verify` exits 3 when any entry fails its integrity re-hash.
    """
    try:
        if cache_dir is None:
            if config_path is None:
                raise ConfigError("give --cache-dir or --config")
            cache_dir = RunConfig.from_file(config_path).cache_dir
            if not cache_dir:
                raise ConfigError("config has caching disabled (cache_dir is null)")
        if action == "stats":
            _echo_json(pipeline.cache_stats(cache_dir))
        elif action == "clear":
            _echo_json(pipeline.cache_clear(cache_dir))
        else:
            report = pipeline.cache_verify(cache_dir)
            _echo_json(report)
            if not report["ok"]:
                sys.exit(3)
    except RewardScopeError as exc:
        _fail(exc)


main = cli

if __name__ == "__main__":
    main()
