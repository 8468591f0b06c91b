"""``dsbn`` command line: train, ablate, multisource, export-embeddings, eval.

Exit codes: 0 success, 2 configuration/usage error, 3 training failure.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import harness
from .checkpoint import load_checkpoint
from .config import BASELINES, ExperimentConfig, load_config
from .data import evaluate_transductive
from .errors import ConfigurationError, DomainLookupError, TrainingFailure
from .tensor import no_grad

EXIT_CONFIG = 2
EXIT_TRAINING = 3


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"``, ``"0-4"`` or a mix of both."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise ConfigurationError(f"--seeds: cannot parse {text!r}") from None
    if not seeds:
        raise ConfigurationError("--seeds: no seeds given")
    return seeds


def resolve_config(path: str | None, seeds: str | None, iters: int | None) -> ExperimentConfig:
    config = load_config(path) if path else ExperimentConfig().validate()
    if seeds is not None:
        config = replace(config, seeds=parse_seeds(seeds))
    if iters is not None:
        config = replace(
            config,
            stage1=replace(config.stage1, max_iters=iters),
            stage2=replace(config.stage2, max_iters=iters),
        )
    return config.validate()


def guarded(fn):
    """Map library errors onto the exit-code contract."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigurationError, DomainLookupError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except TrainingFailure as exc:
            click.echo(f"training failed: {exc}", err=True)
            sys.exit(EXIT_TRAINING)

    return wrapper


config_opt = click.option("--config", "config_path", type=str, help="TOML experiment config.")
seeds_opt = click.option("--seeds", type=str, help="Override seeds, e.g. 0,1,2 or 0-4.")
iters_opt = click.option("--iters", type=click.IntRange(min=1), help="Override max_iters for both stages.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Domain-specific batch normalization experiments on synthetic shift data."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command()
@config_opt
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Run directory.")
@seeds_opt
@iters_opt
@guarded
def train(config_path, out, seeds, iters):
    """Run the configured pipeline and write metrics, report, checkpoint."""
    if config_path is None:
        raise ConfigurationError("--config is required for train")
    config = resolve_config(config_path, seeds, iters)
    harness.run_train(config, Path(out))
    click.echo((Path(out) / "report.csv").read_text(), nl=False)


@main.command()
@config_opt
@click.option("--out", required=True, type=click.Path(file_okay=False))
@seeds_opt
@iters_opt
@click.option(
    "--baseline",
    "baselines",
    multiple=True,
    type=click.Choice(BASELINES + ("all",)),
    help="Baselines to grid over (default: the config's).",
)
@guarded
def ablate(config_path, out, seeds, iters, baselines):
    """Stage-1 x stage-2 normalization grid with the stage-2 gain."""
    config = resolve_config(config_path, seeds, iters)
    chosen = list(BASELINES) if "all" in baselines else list(dict.fromkeys(baselines)) or [config.baseline]
    harness.run_ablate(config, Path(out), chosen)
    click.echo((Path(out) / "report.csv").read_text(), nl=False)


@main.command()
@config_opt
@click.option("--out", required=True, type=click.Path(file_okay=False))
@seeds_opt
@iters_opt
@guarded
def multisource(config_path, out, seeds, iters):
    """Single vs merged vs separate sources, each with BN and DSBN."""
    config = resolve_config(config_path, seeds, iters)
    harness.run_multisource(config, Path(out))
    click.echo((Path(out) / "report.csv").read_text(), nl=False)


def _datasets_for(config: ExperimentConfig, seed: int, which: str):
    sources, target = harness.build_datasets(config, seed)
    return {"target": [target], "sources": list(sources), "all": list(sources) + [target]}[which]


@main.command("export-embeddings")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@config_opt
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="CSV file.")
@click.option("--seed", type=int, default=None, help="Dataset seed (default: checkpoint's).")
@click.option("--dataset", type=click.Choice(["target", "sources", "all"]), default="target")
@guarded
def export_embeddings(checkpoint, config_path, out, seed, dataset):
    """Penultimate-layer features, one row per example, in eval mode."""
    config = resolve_config(config_path, None, None)
    ck = load_checkpoint(checkpoint)
    seed = ck.meta.get("seed", config.seeds[0]) if seed is None else seed
    rows = []
    for ds in _datasets_for(config, seed, dataset):
        with no_grad():
            feats, _ = ck.network.forward_with_features(ds.features, domain=ds.domain, training=False)
        for i, (f, y) in enumerate(zip(feats.data, ds.labels)):
            rows.append([i, str(ds.domain), int(y)] + [repr(float(v)) for v in f])
    k = len(rows[0]) - 3 if rows else 0
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "domain", "class"] + [f"f_{j + 1}" for j in range(k)])
        w.writerows(rows)
    click.echo(f"wrote {len(rows)} rows to {out}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@config_opt
@seeds_opt
@guarded
def eval_(checkpoint, config_path, seeds):
    """Transductive target metrics of a checkpoint, one JSON line per seed."""
    config = resolve_config(config_path, seeds, None)
    ck = load_checkpoint(checkpoint)
    use = config.seeds if seeds is not None else [ck.meta.get("seed", config.seeds[0])]
    for s in use:
        _, target = harness.build_datasets(config, s)
        metrics = evaluate_transductive(ck.network, target)
        click.echo(json.dumps({"seed": s, **metrics.as_dict()}, sort_keys=True))


if __name__ == "__main__":  # pragma: no cover
    main()
