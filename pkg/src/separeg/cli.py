"""Command line entry points.

Every stage of the pipeline is its own subcommand; ``run`` executes all
of them in order and ``report`` aggregates finished runs. Config errors
exit with code 2, stage errors (missing artifacts, broken preconditions)
with code 3.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from .errors import ConfigError, SepaRegError
from .finetune_eval import MetricsReport
from .pipeline import PROFILES, RunConfig, run, summarize_runs


def _load_config(config, profile, seed, out) -> RunConfig:
    if config is not None:
        try:
            raw = json.loads(Path(config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
    else:
        raw = {}
    if profile is not None:
        raw["profile"] = profile
    if seed is not None:
        # a CLI seed reseeds the whole run, including per-stage seeds the
        # config file may have pinned
        raw["seed"] = seed
        for section in ("pretrain", "intra", "distill", "finetune"):
            if isinstance(raw.get(section), dict) and "seed" in raw[section]:
                raw[section]["seed"] = seed
    if out is not None:
        raw["out_dir"] = out
    return RunConfig.from_dict(raw)


def _common(fn):
    fn = click.option("--out", default=None, help="Run directory (overrides config).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Seed (reseeds the whole run).")(fn)
    fn = click.option(
        "--profile", type=click.Choice(list(PROFILES)), default=None, help="Config profile."
    )(fn)
    fn = click.option(
        "-c", "--config", type=click.Path(), default=None, help="JSON run config file."
    )(fn)
    return fn


def _handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except SepaRegError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)

    return wrapper


@click.group()
def main():
    """Region-separated contrastive pretraining for CT segmentation."""


def _stage_command(name: str, stage: str, doc: str):
    @main.command(name, help=doc)
    @_common
    @_handled
    def _cmd(config, profile, seed, out):
        cfg = _load_config(config, profile, seed, out)
        run(cfg, only=stage)
        click.echo(f"stage {stage} finished in {cfg.out_dir}")

    return _cmd


_stage_command("separate", "separate", "Build the shuffled region set from synthetic volumes.")
_stage_command("pretrain", "pretrain", "Contrastive pretraining on all regions.")
_stage_command("cluster", "cluster", "Cluster region embeddings into organ subsets.")
_stage_command("pretrain-intra", "pretrain_intra", "Pretrain one model per cluster subset.")
_stage_command("distill", "distill", "Integrate all teachers into the student encoder.")
_stage_command("finetune", "finetune", "Fine-tune the segmentation net with Dice loss.")
_stage_command("evaluate", "evaluate", "Patient-level DSC / HD95 on the test split.")


@main.command("run", help="Run every stage in order; resumable.")
@_common
@click.option("--resume", is_flag=True, help="Continue a run already in out_dir.")
@_handled
def run_cmd(config, profile, seed, out, resume):
    cfg = _load_config(config, profile, seed, out)
    report_path = run(cfg, resume=resume)
    report = MetricsReport.load(report_path)
    click.echo(f"report: {report_path}")
    click.echo(
        "dsc: %.4f +- %.4f  hd95: %s  (patients: %d)"
        % (
            report.aggregate["dsc_mean"],
            report.aggregate["dsc_stderr"],
            report.aggregate["hd95_mean"],
            report.aggregate["n_patients"],
        )
    )


@main.command("report", help="Aggregate finished runs into a table and plot.")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path())
@click.option("--out", default="summary", help="Output prefix for .csv and .png.")
@_handled
def report_cmd(run_dirs, out):
    result = summarize_runs(list(run_dirs), out)
    click.echo(f"wrote {result['csv']} and {result['plot']}")
    for row in result["rows"]:
        click.echo(
            "iters=%s runs=%d dsc=%.4f +- %.4f"
            % (row["pretrain_iterations"], row["n_runs"], row["dsc_mean"], row["dsc_stderr"])
        )


if __name__ == "__main__":
    main()
