"""Command-line entry point: ``anchorset <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training abort,
4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict

from . import __version__
from .anchors import aggregate_average, aggregate_weighted, write_anchors
from .data import SyntheticSpec, atomic_write_text, read_dataset, write_dataset
from .encoder import embed_dataset, load_checkpoint
from .errors import AnchorsetError, ConfigError
from .evaluation import evaluate_retrieval
from .experiments import BENCHMARK_SPEC, QUERIES_PER_CLASS, ablation, make_benchmark, rows_to_csv, seed_variance_experiment
from .trainer import TrainConfig, Trainer, resume

log = logging.getLogger("anchorset")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3, 4

_LOSS_FLAG = {"cls": "cls", "triplet": "triplet", "anchor": "anchor",
              "triplet-anchor": "triplet_anchor", "center": "center"}
_SCHEDULE_FLAG = {"fixed": "fixed", "epoch": "per_epoch", "iteration": "per_iteration"}
_METRIC_FLAG = {"l2": "euclidean", "sql2": "squared_euclidean"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _source_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> TrainConfig:
    base = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            base = json.load(fh)
        if not isinstance(base, dict):
            raise ConfigError("config file must hold a JSON object")
    overrides = {
        "E_start": args.e_start,
        "E_end": args.e_end,
        "aggregation": args.aggregation,
        "schedule": _SCHEDULE_FLAG.get(args.schedule) if args.schedule else None,
        "metric": _METRIC_FLAG.get(args.metric) if args.metric else None,
        "anchor_margin": args.margin,
        "triplet_margin": args.triplet_margin,
        "base_lr": args.lr,
        "seed": args.seed,
        "stage1_losses": [_LOSS_FLAG[s] for s in args.stage1_loss] if args.stage1_loss else None,
        "stage2_losses": [_LOSS_FLAG[s] for s in args.stage2_loss] if args.stage2_loss else None,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(base).validate()


def _add_config_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--e-start", type=int, help="epoch at which Stage II begins")
    p.add_argument("--e-end", type=int, help="final epoch (exclusive)")
    p.add_argument("--aggregation", choices=["average", "weighted"])
    p.add_argument("--schedule", choices=sorted(_SCHEDULE_FLAG))
    p.add_argument("--stage1-loss", action="append", choices=sorted(_LOSS_FLAG),
                   help="repeat to combine; replaces the configured Stage-I set")
    p.add_argument("--stage2-loss", action="append", choices=sorted(_LOSS_FLAG),
                   help="repeat to combine; replaces the configured Stage-II set")
    p.add_argument("--margin", type=float, help="triplet-anchor margin")
    p.add_argument("--triplet-margin", type=float, help="batch-hard triplet margin")
    p.add_argument("--metric", choices=sorted(_METRIC_FLAG), help="distance for anchor-type losses")
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--seed", type=int)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    spec_kw = asdict(BENCHMARK_SPEC)
    if args.spec:
        with open(args.spec) as fh:
            spec_kw.update(json.load(fh))
    for flag, key in (("C", "C"), ("D_in", "D_in"), ("per_class", "per_class"),
                      ("cluster_spread", "cluster_spread"), ("center_spread", "center_spread"),
                      ("noise_dims", "noise_dims"), ("n_groups", "n_groups")):
        val = getattr(args, flag)
        if val is not None:
            spec_kw[key] = val
    try:
        spec = SyntheticSpec(**spec_kw)
    except TypeError as exc:
        raise ConfigError(f"bad synthetic spec: {exc}") from None
    bench = make_benchmark(args.seed, spec, args.queries_per_class)
    os.makedirs(args.out_dir, exist_ok=True)
    paths = {}
    for name, ds in (("train", bench.train), ("query", bench.query), ("gallery", bench.gallery)):
        path = os.path.join(args.out_dir, f"{name}.txt")
        write_dataset(ds, path)
        paths[name] = path
    print(json.dumps(paths))
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    train_ds = read_dataset(args.train)
    eval_pair = None
    if args.query or args.gallery:
        if not (args.query and args.gallery):
            raise ConfigError("--query and --gallery must be given together")
        eval_pair = (read_dataset(args.query), read_dataset(args.gallery))
    if args.stage2_only and not args.from_checkpoint:
        raise ConfigError("--stage2-only needs --from <checkpoint>")

    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "checkpoint.npz")
    log_path = os.path.join(args.out_dir, "train_log.jsonl")
    manifest_path = os.path.join(args.out_dir, "manifest.json")
    stage1_path = os.path.join(args.out_dir, "stage1.npz") if args.save_stage1 else None
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "version": _source_version(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "finished": None,
        "inputs": {"train": args.train, "query": args.query, "gallery": args.gallery,
                   "from": args.from_checkpoint},
        "outputs": {"checkpoint": ckpt, "log": log_path, "stage1_checkpoint": stage1_path},
    }
    _write_json(manifest_path, manifest)

    hooks = []
    if stage1_path:
        def save_stage1(trainer, epoch):
            if epoch == trainer.cfg.E_start - 1:
                trainer.save(stage1_path)
        hooks.append(save_stage1)

    if args.from_checkpoint:
        trainer = resume(args.from_checkpoint, cfg, train_ds, eval_pair, stage2_only=args.stage2_only, hooks=hooks)
    else:
        trainer = Trainer(cfg, train_ds, eval_pair, hooks)
        trainer.run()
    trainer.save(ckpt)
    atomic_write_text(log_path, trainer.log.to_jsonl())
    manifest["config"] = trainer.cfg.to_dict()
    manifest["config_hash"] = trainer.cfg.hash()
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    _write_json(manifest_path, manifest)
    final = trainer.log.records[-1]
    print(json.dumps({"epoch": final["epoch"], "losses": final["losses"], "eval": final["eval"]}))
    return EXIT_OK


def cmd_eval(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    query, gallery = read_dataset(args.query), read_dataset(args.gallery)
    report = evaluate_retrieval(model, query, gallery, _METRIC_FLAG[args.metric], args.ks,
                                args.exclude_same_group)
    text = json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_export_anchors(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    train_ds = read_dataset(args.train)
    emb = embed_dataset(model, train_ds)
    if args.aggregation == "weighted":
        anchors = aggregate_weighted(emb.features, emb.labels, emb.probs, train_ds.n_classes)
    else:
        anchors = aggregate_average(emb.features, emb.labels, train_ds.n_classes)
    write_anchors(anchors, args.out)
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args)
    rows = ablation(cfg, args.e_starts, args.aggregations, [_LOSS_FLAG[x] for x in args.losses],
                    seed=cfg.seed, n_jobs=args.jobs)
    text = rows_to_csv(rows, ["E_start", "aggregation", "loss", "rank1", "mAP"])
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_variance(args):
    cfg = _load_config(args)
    rows, summary = seed_variance_experiment(cfg, args.n_seeds, bench_seed=args.bench_seed, n_jobs=args.jobs)
    text = rows_to_csv(rows, ["variant", "seed", "rank1", "mAP"])
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if args.summary:
        _write_json(args.summary, summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anchorset", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic train/query/gallery files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    p.add_argument("--C", type=int)
    p.add_argument("--D-in", dest="D_in", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--cluster-spread", type=float)
    p.add_argument("--center-spread", type=float)
    p.add_argument("--noise-dims", type=int)
    p.add_argument("--n-groups", type=int)
    p.add_argument("--queries-per-class", type=int, default=QUERIES_PER_CLASS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="two-stage training")
    _add_config_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--query")
    p.add_argument("--gallery")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--from", dest="from_checkpoint", help="checkpoint to resume from")
    p.add_argument("--stage2-only", action="store_true", help="start Stage II at the checkpoint's epoch")
    p.add_argument("--save-stage1", action="store_true", help="also write stage1.npz at the end of Stage I")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--metric", choices=sorted(_METRIC_FLAG), default="l2")
    p.add_argument("--ks", type=int, nargs="+", default=[1, 5, 10])
    p.add_argument("--exclude-same-group", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-anchors", help="aggregate and write training-set anchors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--aggregation", choices=["average", "weighted"], default="average")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_anchors)

    p = sub.add_parser("ablate", help="E_start x aggregation x loss grid on the synthetic benchmark")
    _add_config_flags(p)
    p.add_argument("--e-starts", type=int, nargs="+", default=[0, 10, 20, 40])
    p.add_argument("--aggregations", nargs="+", choices=["average", "weighted"], default=["average", "weighted"])
    p.add_argument("--losses", nargs="+", choices=["anchor", "triplet-anchor"], default=["anchor", "triplet-anchor"])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("variance", help="anchor vs parametric-center seed variance")
    _add_config_flags(p)
    p.add_argument("--n-seeds", type=int, default=12)
    p.add_argument("--bench-seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--summary", help="write per-variant mean/std/min/max JSON here")
    p.set_defaults(func=cmd_variance)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AnchorsetError as exc:
        print(f"anchorset: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except json.JSONDecodeError as exc:
        print(f"anchorset: bad configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"anchorset: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
