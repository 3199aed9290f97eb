"""Tour construction from a model: greedy, sampling and beam search."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .decoder import advance
from .model import TSPModel
from .tensor import Tensor
from .tsp import Instance, Tour, batch_tour_lengths, stack


class NonFiniteError(FloatingPointError):
    """A step distribution contained NaN or infinity."""

    def __init__(self, rows, step: int):
        self.rows = [int(r) for r in rows]
        self.step = step
        super().__init__(f"non-finite step distribution at step {step} for batch rows {self.rows}")


@dataclass
class Rollout:
    tours: np.ndarray  # (batch, n)
    lengths: np.ndarray  # (batch,)
    log_prob: Tensor  # (batch,); differentiable when produced under a tape


def _as_coords(instances) -> np.ndarray:
    if isinstance(instances, Instance):
        return instances.coords[None]
    if isinstance(instances, np.ndarray):
        return instances if instances.ndim == 3 else instances[None]
    return stack(instances)


def categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row; zero-probability entries are never chosen."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    hit = cum > u[:, None]
    choice = np.argmax(hit, axis=1)
    miss = ~hit.any(axis=1)
    if miss.any():  # u rounded up to the total
        choice[miss] = np.argmax(probs[miss], axis=1)
    return choice


def rollout(
    model: TSPModel,
    coords: np.ndarray,
    strategy: str = "greedy",
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Rollout:
    """Decode a full tour per instance.

    ``strategy`` is "greedy" (argmax, lowest index on ties) or "sample"
    (categorical draw from each step distribution). With ``training`` the
    encoder's batch norm uses batch statistics.
    """
    if strategy not in ("greedy", "sample"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    coords = np.asarray(coords)
    b, n, _ = coords.shape
    enc = model.encode(coords, training=training)
    state = model.start(enc)
    picked = []
    for _ in range(n):
        dist = model.step(state)
        p = dist.probs.data
        bad = ~np.isfinite(p).all(axis=1)
        if bad.any():
            raise NonFiniteError(np.flatnonzero(bad), state.t)
        chosen = np.argmax(p, axis=1) if strategy == "greedy" else categorical(p, rng)
        picked.append(T.reshape(T.gather_rows(dist.probs, chosen), (b, 1)))
        state = advance(state, chosen, dist)
    log_prob = T.sum(T.log(T.concat(picked, axis=1)), axis=1)
    tours = state.partial
    return Rollout(tours, batch_tour_lengths(coords, tours), log_prob)


def greedy_decode(model: TSPModel, instances) -> Rollout:
    """Pick the most probable city at every step (ties go to the lowest index)."""
    return rollout(model, _as_coords(instances), "greedy")


def sample_decode(model: TSPModel, instances, seed) -> Rollout:
    """Draw each city from the step distribution; reproducible for a given seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    return rollout(model, _as_coords(instances), "sample", rng)


@dataclass
class BeamResult:
    tours: list  # list[Tour], best log-probability first
    log_probs: list  # list[float]

    @property
    def most_probable(self) -> Tour:
        return self.tours[0]

    @property
    def shortest(self) -> Tour:
        # stable min keeps the more probable tour on equal length
        return min(self.tours, key=lambda t: t.length)


def beam_search(model: TSPModel, instance, width: int) -> BeamResult:
    """Breadth-first search keeping the ``width`` best partial tours by summed log-probability.

    Every live beam is expanded by every unvisited city; candidates are ranked
    by accumulated log-probability with ties broken by the lexicographically
    smaller city sequence. All live beams go through the decoder as one batch.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    inst = instance if isinstance(instance, Instance) else Instance(np.asarray(instance))
    n = inst.n
    enc = model.encode(inst.coords[None], training=False)
    state = model.start(enc)
    scores = [0.0]
    seqs: list[tuple] = [()]
    for _ in range(n):
        dist = model.step(state)
        with np.errstate(divide="ignore"):
            logp = np.log(dist.probs.data.astype(np.float64))
        cands = []
        for b, (score, seq) in enumerate(zip(scores, seqs)):
            for c in np.flatnonzero(~state.visited[b]):
                cands.append((-(score + logp[b, c]), seq + (int(c),), b, int(c)))
        cands.sort(key=lambda item: (item[0], item[1]))
        kept = cands[:width]
        beams = np.array([k[2] for k in kept], dtype=np.int64)
        cities = np.array([k[3] for k in kept], dtype=np.int64)
        state = advance(state.select(beams), cities, dist.select(beams))
        scores = [-k[0] for k in kept]
        seqs = [k[1] for k in kept]
    tours = [Tour.of(inst, seq) for seq in seqs]
    return BeamResult(tours, scores)
