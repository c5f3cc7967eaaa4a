"""Desk-scale benchmark and the experiment runners built on it.

The benchmark trains on one synthetic draw and evaluates retrieval on a
second draw with unseen identities, split into query and gallery.
"""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .anchors import aggregate_average
from .data import Dataset, SyntheticSpec, generate_synthetic, split_query_gallery
from .encoder import embed_dataset
from .errors import AnchorsetError, ConfigError
from .evaluation import cluster_stats, evaluate_retrieval
from .trainer import TrainConfig, Trainer

log = logging.getLogger(__name__)

BENCHMARK_SPEC = SyntheticSpec(
    C=50, D_in=32, per_class=30, cluster_spread=1.0, center_spread=1.5, noise_dims=16, seed=0
)
QUERIES_PER_CLASS = 5

ANCHOR_VARIANT = "anchor"
CENTER_VARIANT = "parametric_center"
VARIANTS = (ANCHOR_VARIANT, CENTER_VARIANT)


@dataclass
class Benchmark:
    train: Dataset
    query: Dataset
    gallery: Dataset


def make_benchmark(seed: int = 0, spec: SyntheticSpec = BENCHMARK_SPEC, queries_per_class: int = QUERIES_PER_CLASS) -> Benchmark:
    """Training draw with seed ``2*seed``; held-out identities drawn with ``2*seed + 1``."""
    train = generate_synthetic(replace(spec, seed=2 * seed))
    held_out = generate_synthetic(replace(spec, seed=2 * seed + 1))
    query, gallery = split_query_gallery(held_out, queries_per_class, seed)
    return Benchmark(train, query, gallery)


@dataclass
class TwoStageResult:
    seed: int
    stage1_mAP: float
    stage1_rank1: float
    stage1_intra: float
    final_mAP: float
    final_rank1: float
    final_intra: float
    log: object = None

    @property
    def intra_reduction(self) -> float:
        return 1.0 - self.final_intra / self.stage1_intra


def _snapshot(trainer: Trainer, bench: Benchmark):
    emb = embed_dataset(trainer.model, bench.train)
    anchors = aggregate_average(emb.features, emb.labels, bench.train.n_classes)
    stats = cluster_stats(emb.features, emb.labels, anchors, trainer.cfg.metric)
    report = evaluate_retrieval(trainer.model, bench.query, bench.gallery)
    return report.mAP, report.rank1, stats.mean_intra


def run_two_stage(cfg: TrainConfig, bench: Benchmark) -> TwoStageResult:
    """Train and record retrieval / compactness at the end of Stage I and at the end.

    With ``E_start == 0`` the "Stage I" snapshot is the untrained model.
    """
    snaps = {}

    def hook(trainer, epoch):
        if epoch == trainer.cfg.E_start - 1:
            snaps["stage1"] = _snapshot(trainer, bench)

    trainer = Trainer(cfg, bench.train, None, hooks=[hook])
    if cfg.E_start == 0:
        snaps["stage1"] = _snapshot(trainer, bench)
    trainer.run()
    final = _snapshot(trainer, bench)
    s1 = snaps["stage1"]
    return TwoStageResult(cfg.seed, s1[0], s1[1], s1[2], final[0], final[1], final[2], trainer.log)


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Anchor pipeline keeps ``base``; the center baseline trains cls+triplet+center throughout."""
    if variant == ANCHOR_VARIANT:
        return base
    if variant == CENTER_VARIANT:
        losses = ("cls", "triplet", "center")
        return replace(base, stage1_losses=losses, stage2_losses=losses)
    raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")


def _run_job(job):
    cfg, bench_seed, tag = job
    bench = make_benchmark(bench_seed)
    try:
        res = run_two_stage(cfg, bench)
    except AnchorsetError as exc:
        raise type(exc)(f"run {tag} (seed {cfg.seed}) aborted: {exc}") from exc
    res.log = None
    return tag, res


def _map_jobs(jobs, n_jobs):
    if n_jobs and n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def seed_variance_experiment(base_cfg: TrainConfig, n_seeds: int = 12, variants=VARIANTS, bench_seed: int = 0, n_jobs: int = 1):
    """Train every variant with seeds ``0..n_seeds-1`` on one fixed benchmark draw.

    Returns ``(rows, summary)``: one row per run and per-variant mean / std /
    min / max of final rank@1 and mAP.
    """
    if n_seeds < 2:
        raise ConfigError("seed variance experiment needs n_seeds >= 2")
    jobs = [
        (replace(variant_config(base_cfg, v), seed=s), bench_seed, v)
        for v in variants for s in range(n_seeds)
    ]
    rows = []
    for variant, res in _map_jobs(jobs, n_jobs):
        rows.append({"variant": variant, "seed": res.seed, "rank1": res.final_rank1, "mAP": res.final_mAP})
    summary = {}
    for v in variants:
        sub = [r for r in rows if r["variant"] == v]
        entry = {}
        for metric in ("rank1", "mAP"):
            vals = np.array([r[metric] for r in sub])
            entry[metric] = {
                "mean": float(vals.mean()), "std": float(vals.std(ddof=1)),
                "min": float(vals.min()), "max": float(vals.max()),
            }
        summary[v] = entry
    return rows, summary


def ablation(base_cfg: TrainConfig, e_starts=(0, 10, 20, 40), aggregations=("average", "weighted"),
             losses=("anchor", "triplet_anchor"), seed: int = 0, n_jobs: int = 1):
    """Grid over Stage-II start epoch, aggregation method and anchor loss.

    Stage I uses classification only and Stage II adds the anchor-type loss
    under test. A row with
    ``E_start=None`` is the classification-only baseline.
    """
    jobs = []
    baseline = replace(base_cfg, stage1_losses=("cls",), stage2_losses=("cls",), seed=seed)
    jobs.append((baseline, seed, (None, "-", "-")))
    for e in e_starts:
        for agg in aggregations:
            for loss in losses:
                cfg = replace(base_cfg, stage1_losses=("cls",), stage2_losses=("cls", loss),
                              E_start=e, aggregation=agg, seed=seed)
                jobs.append((cfg, seed, (e, agg, loss)))
    rows = []
    for (e, agg, loss), res in _map_jobs(jobs, n_jobs):
        rows.append({"E_start": e, "aggregation": agg, "loss": loss,
                     "rank1": res.final_rank1, "mAP": res.final_mAP})
    return rows


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({c: ("" if r[c] is None else r[c]) for c in columns})
    return buf.getvalue()
