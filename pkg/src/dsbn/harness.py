"""Seeded experiment runs, the ablation grid, multi-source comparison, and
report rendering.

Every run appends plain dict records. ``kind == "final"`` records carry the
final metrics of one trained model; reports are rendered from those records
alone, so any report can be rebuilt from ``metrics.jsonl``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import ExperimentConfig, dump_config
from .data import LabeledDataset, make_multi_source_blobs, make_shifted_blobs, merge_sources
from .pipeline import StageResult, iterate_stage2, train_stage1

log = logging.getLogger(__name__)

NORM_GRID = (("bn", "bn"), ("bn", "dsbn"), ("dsbn", "bn"), ("dsbn", "dsbn"))


# ---------------------------------------------------------------------------
# seeds and data


def seed_streams(seed: int) -> tuple[np.random.SeedSequence, ...]:
    """Independent child seeds for data generation, stage 1 and stage 2."""
    return tuple(np.random.SeedSequence(seed).spawn(3))


def build_datasets(config: ExperimentConfig, seed: int, mode: str | None = None):
    """``(sources, target)`` for ``mode`` (defaults to ``config.multi_source_mode``).

    ``single`` is the one-source benchmark; ``merged``/``separate`` use the
    multi-source generator, with sources concatenated or kept apart.
    """
    mode = mode or config.multi_source_mode
    d = config.data
    rng = np.random.default_rng(seed_streams(seed)[0])
    if mode == "single":
        src, tgt = make_shifted_blobs(
            d.classes, d.dims, d.n_per_class, d.shift, np.deg2rad(d.rotation_deg), d.noise, rng, d.radius
        )
        return [src], tgt
    sources, tgt = make_multi_source_blobs(
        d.num_sources,
        d.source_shifts,
        np.deg2rad(d.source_rotations_deg),
        d.shift,
        np.deg2rad(d.rotation_deg),
        d.classes,
        d.dims,
        d.n_per_class,
        d.noise,
        rng,
        d.radius,
    )
    if mode == "merged":
        return [merge_sources(sources)], tgt
    return sources, tgt


def _final(metrics, **tags) -> dict:
    return {"kind": "final", **tags, **metrics.as_dict()}


def _history(history: list[dict], **tags) -> list[dict]:
    return [{"kind": "eval", **tags, **h} for h in history]


# ---------------------------------------------------------------------------
# single pipeline run


def run_pipeline(
    config: ExperimentConfig,
    seed: int,
    sources: Sequence[LabeledDataset] | None = None,
    target: LabeledDataset | None = None,
    norm_stage1: str | None = None,
    norm_stage2: str | None = None,
    tags: dict | None = None,
) -> tuple[list[dict], StageResult, np.random.Generator]:
    """Stage 1 then (unless ``norm_stage2 == "none"``) the stage-2 rounds.

    Returns the records, the last trained stage and the generator that drove it.
    """
    if sources is None:
        sources, target = build_datasets(config, seed)
    n1 = norm_stage1 or config.norm_stage1
    n2 = norm_stage2 or config.norm_stage2
    tags = {"seed": seed, "baseline": config.baseline, "norm_stage1": n1, "norm_stage2": n2, **(tags or {})}
    _, ss1, ss2 = seed_streams(seed)
    rng1 = np.random.default_rng(ss1)
    s1 = train_stage1(config, sources, target, rng1, norm=n1)
    records = _history(s1.history, **tags) + [_final(s1.metrics, stage="stage1", **tags)]
    if n2 == "none":
        return records, s1, rng1
    rng2 = np.random.default_rng(ss2)
    rounds = iterate_stage2(config.stage2_iterations, config, s1.bank, sources, target, rng2, n2, s1.network)
    for j, res in enumerate(rounds, start=1):
        records += _history(res.history, **tags)
        records.append(_final(res.metrics, stage=f"stage2.{j}", **tags))
    return records, rounds[-1], rng2


def train_seed(config: ExperimentConfig, seed: int, checkpoint_path: str | None = None) -> list[dict]:
    records, last, rng = run_pipeline(config, seed, tags={"experiment": "train"})
    if checkpoint_path is not None:
        disc = getattr(last, "discriminator", None)
        save_checkpoint(
            checkpoint_path,
            last.network,
            last.optimizer,
            rng,
            discriminator=disc,
            meta={"seed": seed, "stage": records[-1]["stage"]},
        )
    return records


def ablate_seed(config: ExperimentConfig, seed: int, baseline: str) -> list[dict]:
    """All four normalization cells for one seed; stage 1 is shared per stage-1 norm."""
    config = replace(config, baseline=baseline)
    sources, target = build_datasets(config, seed)
    _, ss1, ss2 = seed_streams(seed)
    tags = {"experiment": "ablate", "seed": seed, "baseline": baseline}
    records: list[dict] = []
    for n1 in ("bn", "dsbn"):
        s1 = train_stage1(config, sources, target, np.random.default_rng(ss1), norm=n1)
        records.append(_final(s1.metrics, stage="stage1", norm_stage1=n1, **tags))
        for n2 in ("bn", "dsbn"):
            cfg2 = config
            if n1 != n2 and config.adaptation.stage2_warm_start:
                cfg2 = replace(config, adaptation=replace(config.adaptation, stage2_warm_start=False))
            rng2 = np.random.default_rng(ss2)
            rounds = iterate_stage2(1, cfg2, s1.bank, sources, target, rng2, n2, s1.network)
            records.append(_final(rounds[0].metrics, stage="stage2.1", norm_stage1=n1, norm_stage2=n2, **tags))
    return records


def multisource_seed(config: ExperimentConfig, seed: int) -> list[dict]:
    """Stage-1 accuracy for each single source, merged and separate, under BN and DSBN."""
    sources, target = build_datasets(config, seed, "separate")
    merged = merge_sources(sources)
    ss1 = seed_streams(seed)[1]
    tags = {"experiment": "multisource", "seed": seed, "baseline": config.baseline, "stage": "stage1"}
    settings = [(f"single[{s.domain}]", [s]) for s in sources] + [("merged", [merged]), ("separate", sources)]
    records = []
    for norm in ("bn", "dsbn"):
        for name, srcs in settings:
            res = train_stage1(config, srcs, target, np.random.default_rng(ss1), norm=norm)
            records.append(_final(res.metrics, setting=name, norm=norm, **tags))
    return records


# ---------------------------------------------------------------------------
# execution


def max_workers() -> int:
    raw = os.environ.get("DSBN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer DSBN_THREADS=%r", raw)
        return 1


def run_tasks(fn: Callable, arg_tuples: Sequence[tuple]) -> list:
    """Apply ``fn`` to each argument tuple, in a process pool when
    ``DSBN_THREADS`` > 1. Results come back in submission order."""
    workers = min(max_workers(), len(arg_tuples))
    if workers <= 1:
        return [fn(*args) for args in arg_tuples]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for args in arg_tuples]
        return [f.result() for f in futures]


def flatten(chunks: Iterable[list[dict]]) -> list[dict]:
    return [r for chunk in chunks for r in chunk]


# ---------------------------------------------------------------------------
# records and reports


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def finals(records: Iterable[dict], **match) -> list[dict]:
    return [r for r in records if r.get("kind") == "final" and all(r.get(k) == v for k, v in match.items())]


def fmt(x: float) -> str:
    return f"{x:.1f}"


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def train_report(records: list[dict]) -> str:
    """Per-class table: one row per (seed, stage), then seed means per stage."""
    rows = [r for r in finals(records)]
    if not rows:
        raise ValueError("no final records to report")
    classes = len(rows[0]["per_class"])
    out = [["seed", "stage"] + [f"class_{c}" for c in range(classes)] + ["Avg"]]
    stages: dict[str, list[dict]] = {}
    for r in rows:
        out.append([r["seed"], r["stage"]] + [fmt(v) for v in r["per_class"]] + [fmt(r["avg"])])
        stages.setdefault(r["stage"], []).append(r)
    for stage, rs in stages.items():
        per_class = np.mean([r["per_class"] for r in rs], axis=0)
        out.append(["mean", stage] + [fmt(v) for v in per_class] + [fmt(mean_std([r["avg"] for r in rs])[0])])
    return _csv(out)


def ablation_table(records: list[dict]) -> list[dict]:
    """Per (baseline, stage-1 norm, stage-2 norm): seed mean/std of both stages and the gain."""
    table = []
    for baseline in sorted({r["baseline"] for r in finals(records, experiment="ablate")}):
        for n1, n2 in NORM_GRID:
            s1 = finals(records, experiment="ablate", baseline=baseline, stage="stage1", norm_stage1=n1)
            s2 = finals(records, experiment="ablate", baseline=baseline, norm_stage1=n1, norm_stage2=n2)
            if not s1 or not s2:
                continue
            m1, sd1 = mean_std([r["avg"] for r in s1])
            m2, sd2 = mean_std([r["avg"] for r in s2])
            table.append(
                {"baseline": baseline, "stage1": n1, "stage2": n2, "stage1_avg": m1, "stage1_std": sd1,
                 "stage2_avg": m2, "stage2_std": sd2, "seeds": len(s2)}
            )
    return table


def ablation_report(records: list[dict]) -> str:
    """Delta is taken between the displayed (rounded) stage averages so the
    printed columns add up."""
    out = [["baseline", "stage1", "stage2", "stage1_avg", "stage1_std", "stage2_avg", "stage2_std", "delta", "seeds"]]
    for row in ablation_table(records):
        a1, a2 = round(row["stage1_avg"], 1), round(row["stage2_avg"], 1)
        out.append(
            [row["baseline"], row["stage1"].upper(), row["stage2"].upper(), fmt(a1), fmt(row["stage1_std"]),
             fmt(a2), fmt(row["stage2_std"]), fmt(a2 - a1), row["seeds"]]
        )
    return _csv(out)


def multisource_table(records: list[dict]) -> dict[tuple[str, str], tuple[float, float]]:
    rows = finals(records, experiment="multisource")
    singles = sorted({r["setting"] for r in rows if r["setting"].startswith("single[")})
    table = {}
    for norm in ("bn", "dsbn"):
        for setting in singles + ["merged", "separate"]:
            vals = [r["avg"] for r in rows if r["norm"] == norm and r["setting"] == setting]
            if vals:
                table[(setting, norm)] = mean_std(vals)
        per_seed = {}
        for r in rows:
            if r["norm"] == norm and r["setting"] in singles:
                per_seed.setdefault(r["seed"], []).append(r["avg"])
        if per_seed:
            table[("single", norm)] = mean_std([np.mean(v) for _, v in sorted(per_seed.items())])
    return table


def multisource_report(records: list[dict]) -> str:
    table = multisource_table(records)
    settings = sorted({s for s, _ in table if s.startswith("single[")}) + ["single", "merged", "separate"]
    out = [["setting", "BN", "BN_std", "DSBN", "DSBN_std"]]
    for s in settings:
        if (s, "bn") in table and (s, "dsbn") in table:
            (b, bs), (d, ds) = table[(s, "bn")], table[(s, "dsbn")]
            out.append([s, fmt(b), fmt(bs), fmt(d), fmt(ds)])
    return _csv(out)


def iteration_means(records: list[dict]) -> dict[str, float]:
    """Seed-mean average accuracy per stage label (stage1, stage2.1, ...)."""
    by_stage: dict[str, list[float]] = {}
    for r in finals(records):
        by_stage.setdefault(r["stage"], []).append(r["avg"])
    return {k: mean_std(v)[0] for k, v in by_stage.items()}


# ---------------------------------------------------------------------------
# commands


def run_train(config: ExperimentConfig, out: Path) -> list[dict]:
    """Run every configured seed; write metrics.jsonl, report.csv,
    checkpoint.bin (first seed's final model) and config.resolved."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(dump_config(config))
    args = [(config, s, str(out / "checkpoint.bin") if i == 0 else None) for i, s in enumerate(config.seeds)]
    records = flatten(run_tasks(train_seed, args))
    write_jsonl(out / "metrics.jsonl", records)
    (out / "report.csv").write_text(train_report(records))
    return records


def run_ablate(config: ExperimentConfig, out: Path, baselines: Sequence[str]) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(dump_config(config))
    args = [(config, s, b) for b in baselines for s in config.seeds]
    records = flatten(run_tasks(ablate_seed, args))
    write_jsonl(out / "metrics.jsonl", records)
    (out / "report.csv").write_text(ablation_report(records))
    return records


def run_multisource(config: ExperimentConfig, out: Path) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(dump_config(config))
    records = flatten(run_tasks(multisource_seed, [(config, s) for s in config.seeds]))
    write_jsonl(out / "metrics.jsonl", records)
    (out / "report.csv").write_text(multisource_report(records))
    return records
