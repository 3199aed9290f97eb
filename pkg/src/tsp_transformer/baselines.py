"""Exact and heuristic classical TSP solvers used as references."""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tsp import Instance, Tour, validate_order

BRUTE_FORCE_MAX_N = 10
HELD_KARP_MAX_N = 18

# accepted 2-opt moves must gain more than this, which guarantees termination
IMPROVEMENT_EPS = 1e-12


class SolverLimitError(ValueError):
    pass


@dataclass(frozen=True)
class SolveReport:
    tour: Tour
    method: str
    elapsed: float
    optimal: bool = False

    @property
    def length(self) -> float:
        return self.tour.length


def _timed(method: str, optimal: bool = False):
    def wrap(solver):
        def run(inst: Instance, *args, **kwargs) -> SolveReport:
            start = time.perf_counter()
            order = solver(inst, *args, **kwargs)
            elapsed = time.perf_counter() - start
            return SolveReport(Tour.of(inst, order), method, elapsed, optimal)

        run.__name__ = solver.__name__
        run.__doc__ = solver.__doc__
        return run

    return wrap


_PERM_CACHE: dict[int, np.ndarray] = {}


def _half_permutations(n: int) -> np.ndarray:
    # permutations of 1..n-1, one representative per reversal pair
    perms = _PERM_CACHE.get(n)
    if perms is None:
        perms = np.array(list(itertools.permutations(range(1, n))), dtype=np.int64).reshape(-1, n - 1)
        perms = perms[perms[:, 0] < perms[:, -1]] if n > 3 else perms[:1]
        _PERM_CACHE[n] = perms
    return perms


@_timed("brute_force", optimal=True)
def brute_force(inst: Instance) -> list[int]:
    """Exhaustive search with city 0 fixed and reversed duplicates skipped."""
    n = inst.n
    if n > BRUTE_FORCE_MAX_N:
        raise SolverLimitError(
            f"brute force on n={n} would enumerate {math.factorial(n - 1) // 2} tours; limit is n<={BRUTE_FORCE_MAX_N}"
        )
    dist = inst.distances()
    perms = _half_permutations(n)
    lengths = dist[0, perms[:, 0]] + dist[perms[:, -1], 0]
    lengths = lengths + dist[perms[:, :-1], perms[:, 1:]].sum(axis=1)
    best = int(np.argmin(lengths))
    return [0, *perms[best].tolist()]


@_timed("held_karp", optimal=True)
def held_karp(inst: Instance) -> list[int]:
    """Bitmask dynamic program over subsets of cities 1..n-1.

    ``cost[S, j]`` is the shortest path that starts at city 0, visits exactly
    the cities in S and ends at j in S. Subsets are processed in order of size
    so each layer is a vectorized min over predecessors.
    """
    n = inst.n
    if n > HELD_KARP_MAX_N:
        raise SolverLimitError(f"held_karp needs O(n 2^n) memory; limit is n<={HELD_KARP_MAX_N}, got n={n}")
    dist = inst.distances()
    m = n - 1  # cities 1..n-1 are bits 0..m-1
    full = 1 << m
    cost = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int64)
    for j in range(m):
        cost[1 << j, j] = dist[0, j + 1]

    masks = np.arange(full)
    popcount = np.array([bin(s).count("1") for s in range(full)])
    sub = dist[1:, 1:]
    for size in range(2, m + 1):
        layer = masks[popcount == size]
        for j in range(m):
            sel = layer[(layer >> j) & 1 == 1]
            prev = sel ^ (1 << j)
            cand = cost[prev] + sub[:, j]  # (len(sel), m), inf where k not in prev
            k = np.argmin(cand, axis=1)
            cost[sel, j] = cand[np.arange(sel.size), k]
            parent[sel, j] = k

    closing = cost[full - 1] + dist[1:, 0]
    j = int(np.argmin(closing))
    mask = full - 1
    path = []
    while j >= 0:
        path.append(j + 1)
        nxt = int(parent[mask, j])
        mask ^= 1 << j
        j = nxt
    return [0, *reversed(path)]


def _insertion(inst: Instance, farthest: bool) -> list[int]:
    dist = inst.distances()
    n = inst.n
    masked = dist.copy()
    np.fill_diagonal(masked, -np.inf if farthest else np.inf)
    flat = np.argmax(masked) if farthest else np.argmin(masked)
    a, b = divmod(int(flat), n)
    tour = [min(a, b), max(a, b)]
    in_tour = np.zeros(n, dtype=bool)
    in_tour[tour] = True
    # distance from each city to its closest tour city
    to_tour = np.minimum(dist[a], dist[b])
    while len(tour) < n:
        cand = np.where(in_tour, -np.inf if farthest else np.inf, to_tour)
        city = int(np.argmax(cand) if farthest else np.argmin(cand))
        nodes = np.array(tour)
        nxt = np.roll(nodes, -1)
        increase = dist[nodes, city] + dist[city, nxt] - dist[nodes, nxt]
        pos = int(np.argmin(increase))
        tour.insert(pos + 1, city)
        in_tour[city] = True
        to_tour = np.minimum(to_tour, dist[city])
    return tour


@_timed("nearest_insertion")
def nearest_insertion(inst: Instance) -> list[int]:
    """Grow from the closest pair, always inserting the city nearest to the tour."""
    return _insertion(inst, farthest=False)


@_timed("farthest_insertion")
def farthest_insertion(inst: Instance) -> list[int]:
    """Grow from the farthest pair, always inserting the city farthest from the tour."""
    return _insertion(inst, farthest=True)


def _two_opt_delta(dist, tour, i, j):
    n = len(tour)
    a, b = tour[i], tour[i + 1]
    c, d = tour[j], tour[(j + 1) % n]
    return dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]


def improving_moves(inst: Instance, order: Sequence[int], eps: float = IMPROVEMENT_EPS) -> list[tuple[int, int]]:
    """Every (i, j) whose 2-exchange shortens the tour by more than ``eps``."""
    dist = inst.distances()
    tour = list(order)
    n = len(tour)
    moves = []
    for i in range(n - 2):
        for j in range(i + 2, n if i else n - 1):
            if _two_opt_delta(dist, tour, i, j) < -eps:
                moves.append((i, j))
    return moves


@_timed("two_opt")
def two_opt(inst: Instance, start: Sequence[int], best_improvement: bool = False) -> list[int]:
    """Apply improving 2-exchanges until none is left.

    The default scans pairs (i, j) in lexicographic order and takes the first
    improving move; ``best_improvement`` takes the largest gain per sweep.
    """
    validate_order(start, inst.n)
    dist = inst.distances()
    tour = [int(c) for c in start]
    n = len(tour)
    improved = True
    while improved:
        improved = False
        best = (-IMPROVEMENT_EPS, None)
        for i in range(n - 2):
            for j in range(i + 2, n if i else n - 1):
                delta = _two_opt_delta(dist, tour, i, j)
                if delta < best[0]:
                    if not best_improvement:
                        tour[i + 1 : j + 1] = tour[i + 1 : j + 1][::-1]
                        improved = True
                        continue
                    best = (delta, (i, j))
        if best_improvement and best[1] is not None:
            i, j = best[1]
            tour[i + 1 : j + 1] = tour[i + 1 : j + 1][::-1]
            improved = True
    return tour


def random_tour(n: int, rng: np.random.Generator) -> list[int]:
    return rng.permutation(n).tolist()


def gap(length: float, reference: float) -> float:
    """Percentage excess of ``length`` over the ``reference`` optimum."""
    if not reference > 0:
        raise ValueError(f"reference length must be positive, got {reference}")
    return 100.0 * (length - reference) / reference


SOLVERS = {
    "brute_force": brute_force,
    "held_karp": held_karp,
    "nearest_insertion": nearest_insertion,
    "farthest_insertion": farthest_insertion,
}


def exact_length(inst: Instance) -> Optional[float]:
    """Optimal length when the instance is small enough for held_karp."""
    if inst.n > HELD_KARP_MAX_N:
        return None
    return held_karp(inst).length
