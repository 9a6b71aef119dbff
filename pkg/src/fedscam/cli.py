"""Command-line entry point.

    fedscam run --config exp.cfg [--seed N] [--out DIR] [--workers N] [--timing]
    fedscam compare --config exp.cfg --algorithms fedavg,fedsam,fedscam [--out DIR]
    fedscam partition-stats [--config exp.cfg] [--alpha A] [--clients M] [--seed N]

Exit codes: 0 success, 1 runtime error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ALGORITHMS, ExperimentConfig, parse_config
from .data import DirichletSpec, dirichlet_partition, label_entropy, label_histograms
from .engine import Experiment, load_datasets
from .errors import ConfigError
from .metrics import MetricsSink, write_summary
from .seeding import derive_seed

log = logging.getLogger("fedscam")


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(Path(args.config)) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _summary_line(summary: dict) -> str:
    return (f"{summary['algorithm']}: final_accuracy={summary['final_accuracy']:.4f} "
            f"best_accuracy={summary['best_accuracy']:.4f} rounds={summary['rounds']} "
            f"mean_drift={summary['mean_drift']:.4f} "
            f"partition={summary['partition_checksum'][:12]}")


def cmd_run(args) -> int:
    cfg = _load_config(args)
    exp = Experiment(cfg)
    out = Path(args.out)
    with MetricsSink(out, timing=args.timing) as sink:
        result = exp.run(on_round=sink.write_round)
    write_summary(out / "summary.json", result.summary)
    print(_summary_line(result.summary))
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    unknown = [a for a in algorithms if a not in ALGORITHMS]
    if unknown or not algorithms:
        raise ConfigError(f"unknown algorithm(s) {unknown}; choose from {', '.join(ALGORITHMS)}")
    train, test = load_datasets(cfg)
    base = Experiment(cfg.replace(algorithm=algorithms[0]), train=train, test=test)
    out = Path(args.out)
    summaries = []
    for name in algorithms:
        exp = Experiment(cfg.replace(algorithm=name), train=train, test=test,
                         partition=base.partition)
        with MetricsSink(out, timing=args.timing, prefix=[name], prefix_columns=["algorithm"],
                         filename=f"metrics_{name}.csv") as sink:
            result = exp.run(on_round=sink.write_round)
        summaries.append(result.summary)
        print(_summary_line(result.summary))

    with open(out / "compare.csv", "w", newline="") as merged:
        for k, name in enumerate(algorithms):
            lines = (out / f"metrics_{name}.csv").read_text().splitlines(keepends=True)
            merged.writelines(lines if k == 0 else lines[1:])
    checksums = {s["algorithm"]: s["partition_checksum"] for s in summaries}
    (out / "compare_summary.json").write_text(json.dumps(
        {"partition_checksums": checksums,
         "shared_partition": len(set(checksums.values())) == 1,
         "runs": summaries}, indent=2) + "\n")
    return 0


def cmd_partition_stats(args) -> int:
    cfg = _load_config(args)
    changes = {}
    if args.alpha is not None:
        changes["alpha"] = args.alpha
    if args.clients is not None:
        changes["num_clients"] = args.clients
    if changes:
        cfg = cfg.replace(dirichlet=dataclasses.replace(cfg.dirichlet, **changes))
    train, _ = load_datasets(cfg)
    spec = DirichletSpec(cfg.dirichlet.alpha, cfg.dirichlet.num_clients, cfg.dirichlet.min_size,
                         derive_seed(cfg.seed, "partition"))
    part = dirichlet_partition(train, spec)
    hists = label_histograms(train, part)
    entropies = [label_entropy(h) for h in hists]

    header = ["client", "size"] + [f"label_{c}" for c in range(train.classes)] + ["entropy"]
    rows = [[str(i), str(int(h.sum()))] + [str(int(v)) for v in h] + [f"{e:.6f}"]
            for i, (h, e) in enumerate(zip(hists, entropies))]
    mean_entropy = sum(entropies) / len(entropies)
    stats = {"alpha": spec.alpha, "num_clients": spec.num_clients, "min_size": spec.min_size,
             "mean_entropy": mean_entropy, "partition_checksum": part.checksum(),
             "sizes": part.sizes()}

    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    print(f"mean_entropy={mean_entropy:.6f}", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "partition_stats.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        (out / "partition_stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedscam", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default="runs/latest")
    run.add_argument("--workers", type=int)
    run.add_argument("--timing", action="store_true", help="fill the wall_millis column")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run several algorithms on one partition")
    cmp_.add_argument("--config", required=True)
    cmp_.add_argument("--algorithms", default="fedavg,fedsam,fedscam")
    cmp_.add_argument("--seed", type=int)
    cmp_.add_argument("--out", default="runs/compare")
    cmp_.add_argument("--workers", type=int)
    cmp_.add_argument("--timing", action="store_true")
    cmp_.set_defaults(func=cmd_compare)

    ps = sub.add_parser("partition-stats", help="per-client label histograms and entropies")
    ps.add_argument("--config")
    ps.add_argument("--alpha", type=float)
    ps.add_argument("--clients", type=int)
    ps.add_argument("--seed", type=int)
    ps.add_argument("--out")
    ps.set_defaults(func=cmd_partition_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every other failure maps to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
