"""Solve instance sets with classical and learned methods and report gaps and timings."""
from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import baselines
from .model import TSPModel
from .search import beam_search, greedy_decode, sample_decode
from .tsp import Instance, Tour, generate

BENCH_SCHEMA_VERSION = 1
BENCH_HEADER = ["method", "n", "mean_len", "gap_pct", "total_time_s", "per_instance_time_s", "beam_width"]
TIMING_HEADER = ["n", "inference_seconds"]

CLASSICAL = ("brute_force", "held_karp", "nearest_insertion", "farthest_insertion", "two_opt")
LEARNED = ("greedy", "sample", "beam")


@dataclass
class BenchRow:
    method: str
    n: int
    mean_len: float
    gap_pct: Optional[float]
    total_time_s: float
    per_instance_time_s: float
    beam_width: Optional[int] = None

    def row(self) -> list:
        fmt = lambda v: "" if v is None else repr(v)  # noqa: E731
        return [self.method, self.n, repr(self.mean_len), fmt(self.gap_pct), repr(self.total_time_s),
                repr(self.per_instance_time_s), fmt(self.beam_width)]


def thread_count(requested: Optional[int] = None) -> int:
    env = os.environ.get("TSPT_THREADS")
    if env:
        return max(1, int(env))
    return max(1, requested or 1)


def parse_method(spec: str) -> tuple[str, Optional[int]]:
    """``"beam:50"`` -> ("beam", 50); other names carry no width."""
    name, _, arg = spec.partition(":")
    if name not in CLASSICAL + LEARNED:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(CLASSICAL + LEARNED)}")
    if name == "beam":
        if not arg:
            raise ValueError("beam needs a width, e.g. beam:50")
        return name, int(arg)
    if arg:
        raise ValueError(f"method {name!r} takes no argument")
    return name, None


def _map(fn, items, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def solve_tours(method: str, instances: Sequence[Instance], model: Optional[TSPModel] = None,
                width: Optional[int] = None, seed: int = 0, threads: int = 1,
                select: str = "shortest") -> list[Tour]:
    """Tours for every instance, in input order."""
    if method in LEARNED and model is None:
        raise ValueError(f"method {method!r} needs a trained model checkpoint")
    if method == "greedy":
        r = greedy_decode(model, list(instances))
        return [Tour.of(inst, order) for inst, order in zip(instances, r.tours)]
    if method == "sample":
        r = sample_decode(model, list(instances), seed)
        return [Tour.of(inst, order) for inst, order in zip(instances, r.tours)]
    if method == "beam":
        if width is None:
            raise ValueError("beam search needs a width")
        if select not in ("shortest", "probable"):
            raise ValueError(f"select must be 'shortest' or 'probable', got {select!r}")

        def one(inst):
            res = beam_search(model, inst, width)
            return res.shortest if select == "shortest" else res.most_probable

        return _map(one, instances, threads)
    if method == "two_opt":
        rngs = [np.random.Generator(np.random.PCG64([seed, k])) for k in range(len(instances))]
        return _map(lambda a: baselines.two_opt(a[0], baselines.random_tour(a[0].n, a[1])).tour,
                    list(zip(instances, rngs)), threads)
    solver = baselines.SOLVERS[method]
    return _map(lambda inst: solver(inst).tour, instances, threads)


def reference_lengths(instances: Sequence[Instance], threads: int = 1) -> Optional[np.ndarray]:
    if any(inst.n > baselines.HELD_KARP_MAX_N for inst in instances):
        return None
    return np.array(_map(lambda inst: baselines.held_karp(inst).length, instances, threads))


def mean_gap(lengths: np.ndarray, reference: np.ndarray) -> float:
    """Mean of per-instance percentage gaps."""
    return float(np.mean([baselines.gap(l, r) for l, r in zip(lengths, reference)]))


def run_bench(instances: Sequence[Instance], methods: Sequence[str], model: Optional[TSPModel] = None,
              seed: int = 0, threads: int = 1, reference: Optional[np.ndarray] = None) -> list[BenchRow]:
    parsed = [parse_method(m) for m in methods]
    if reference is None:
        reference = reference_lengths(instances, threads)
    n = instances[0].n
    rows = []
    for name, width in parsed:
        start = time.perf_counter()
        tours = solve_tours(name, instances, model, width, seed, threads)
        total = time.perf_counter() - start
        lengths = np.array([t.length for t in tours])
        g = mean_gap(lengths, reference) if reference is not None else None
        label = f"beam:{width}" if name == "beam" else name
        rows.append(BenchRow(label, n, float(lengths.mean()), g, total, total / len(instances), width))
    return rows


def write_bench(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_HEADER)
        for r in rows:
            writer.writerow(r.row())


def read_bench(path) -> list[BenchRow]:
    opt = lambda s, cast: None if s == "" else cast(s)  # noqa: E731
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != BENCH_HEADER:
            raise ValueError(f"unexpected bench header {header}")
        return [BenchRow(r[0], int(r[1]), float(r[2]), opt(r[3], float), float(r[4]), float(r[5]), opt(r[6], int))
                for r in reader]


def greedy_timing(model: TSPModel, sizes: Sequence[int], repeats: int = 5, seed: int = 0) -> list[tuple[int, float]]:
    """Median wall time of greedy decoding one instance, for each size."""
    out = []
    for n in sizes:
        insts = generate(n, repeats + 1, seed + n)
        greedy_decode(model, insts[0])  # warm-up
        times = []
        for inst in insts[1:]:
            start = time.perf_counter()
            greedy_decode(model, inst)
            times.append(time.perf_counter() - start)
        out.append((n, float(np.median(times))))
    return out


def fit_power_law(series: Sequence[tuple[int, float]]) -> tuple[float, float]:
    """Least-squares fit of ``t = a * n^k`` in log space; returns (a, k)."""
    ns = np.log([s[0] for s in series])
    ts = np.log([s[1] for s in series])
    k, log_a = np.polyfit(ns, ts, 1)
    return float(np.exp(log_a)), float(k)


def write_timing(series, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TIMING_HEADER)
        for n, t in series:
            writer.writerow([n, repr(t)])
