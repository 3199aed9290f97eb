"""Command line entry point: ``tspt generate | train | solve | bench``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench
from .checkpoint import CheckpointError
from .config import ConfigError, parse_config
from .training import Trainer, TrainingAbort, load_policy, train, write_metrics
from .tsp import FormatError, TourError, generate, read_instances, write_instances, write_tours

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _cmd_generate(args) -> int:
    if args.count < 1:
        raise UsageError("count must be >= 1")
    if args.n < 3:
        raise UsageError("n must be >= 3")
    write_instances(generate(args.n, args.count, args.seed), args.out)
    print(f"wrote {args.count} instances of n={args.n} to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = parse_config(Path(args.config).read_text())
    trainer = Trainer.load(args.resume) if args.resume else None
    if trainer is not None:
        old, new = asdict(trainer.config), asdict(config)
        changed = sorted(k for k in new if k != "epochs" and old[k] != new[k])
        if changed:
            raise ConfigError(f"cannot resume: config differs from the checkpoint in {', '.join(changed)}")
        trainer.config = config
    trainer, metrics = train(config, trainer)
    trainer.save(args.out)
    if args.metrics:
        write_metrics(metrics, args.metrics)
    print(f"trained {len(metrics)} epochs; checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_solve(args) -> int:
    if args.strategy == "beam" and args.beam_width is None:
        raise UsageError("--strategy beam requires --beam-width")
    if args.beam_width is not None and args.beam_width < 1:
        raise UsageError("--beam-width must be >= 1")
    model = load_policy(args.ckpt)
    instances = read_instances(args.instances)
    start = time.perf_counter()
    tours = bench.solve_tours(args.strategy, instances, model, args.beam_width, args.seed,
                              bench.thread_count(args.threads), args.select)
    elapsed = time.perf_counter() - start
    write_tours(tours, args.out)
    lengths = np.array([t.length for t in tours])
    print(f"strategy={args.strategy} instances={len(tours)} mean_len={lengths.mean():.6f} "
          f"total_time_s={elapsed:.3f} per_instance_s={elapsed / len(tours):.5f}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    methods = [m for m in args.methods.split(",") if m]
    try:
        parsed = [bench.parse_method(m) for m in methods]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    needs_model = any(name in bench.LEARNED for name, _ in parsed) or args.timing_out
    if needs_model and not args.ckpt:
        raise UsageError("learned methods and timing series need --ckpt")
    model = load_policy(args.ckpt) if args.ckpt else None
    instances = read_instances(args.instances)
    threads = bench.thread_count(args.threads)
    rows = bench.run_bench(instances, methods, model, args.seed, threads)
    bench.write_bench(rows, args.out)
    for r in rows:
        g = "" if r.gap_pct is None else f" gap={r.gap_pct:.3f}%"
        print(f"{r.method:>20s} n={r.n} mean_len={r.mean_len:.5f}{g} time={r.total_time_s:.3f}s")
    if args.timing_out:
        sizes = [int(s) for s in args.timing_ns.split(",")]
        series = bench.greedy_timing(model, sizes, args.timing_repeats, args.seed)
        bench.write_timing(series, args.timing_out)
        _, k = bench.fit_power_law(series)
        print(f"greedy inference time ~ n^{k:.2f} over n in {sizes}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tspt", description="TSP transformer: data, training, decoding and benchmarks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write random uniform instances")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="REINFORCE training from a key=value config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="per-epoch metrics CSV")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("solve", help="decode tours with a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--strategy", choices=("greedy", "sample", "beam"), default="greedy")
    p.add_argument("--beam-width", type=int)
    p.add_argument("--select", choices=("shortest", "probable"), default="shortest",
                   help="which beam tour to report")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("bench", help="compare methods against the exact optimum")
    p.add_argument("--ckpt")
    p.add_argument("--instances", required=True)
    p.add_argument("--methods", default="held_karp,nearest_insertion,farthest_insertion,two_opt")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--timing-out", help="CSV of greedy inference time per n")
    p.add_argument("--timing-ns", default="10,20,40,80")
    p.add_argument("--timing-repeats", type=int, default=5)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tspt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAbort as exc:
        print(f"tspt: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, TourError, CheckpointError, ConfigError, OSError, ValueError) as exc:
        print(f"tspt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
