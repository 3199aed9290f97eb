"""Euclidean TSP instances, tours and their text file formats.

Instance files::

    TSPSET v1 <count> <n>
    x y          # n lines per instance
    ...
                 # blank line between instances

Tour files::

    TOURS v1
    i_1 i_2 ... i_n length

Random instances come from numpy's PCG64 generator, which is portable across
platforms, so a seed pins a dataset exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

INSTANCE_MAGIC = "TSPSET"
TOURS_MAGIC = "TOURS"
FORMAT_VERSION = "v1"


class TourError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, eq=False)
class Instance:
    coords: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (n, 2), got {coords.shape}")
        if coords.shape[0] < 3:
            raise ValueError(f"an instance needs at least 3 cities, got {coords.shape[0]}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coordinates must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def distances(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    def __eq__(self, other) -> bool:
        return isinstance(other, Instance) and np.array_equal(self.coords, other.coords)

    __hash__ = None


@dataclass(frozen=True)
class Tour:
    order: tuple
    length: float

    @classmethod
    def of(cls, inst: Instance, order: Sequence[int]) -> "Tour":
        order = tuple(int(i) for i in order)
        return cls(order, tour_length(inst, order))

    @property
    def n(self) -> int:
        return len(self.order)


def generate(n: int, count: int, seed: int) -> list[Instance]:
    """``count`` instances of ``n`` cities drawn uniformly from the unit square."""
    if n < 3:
        raise ValueError(f"n must be >= 3, got {n}")
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    rng = np.random.Generator(np.random.PCG64(seed))
    coords = rng.random((count, n, 2))
    return [Instance(c, seed=seed) for c in coords]


def stack(instances: Sequence[Instance]) -> np.ndarray:
    """Batch coordinates as a (batch, n, 2) array; all instances must share n."""
    sizes = {inst.n for inst in instances}
    if len(sizes) != 1:
        raise ValueError(f"instances in one batch must share n, got sizes {sorted(sizes)}")
    return np.stack([inst.coords for inst in instances])


def validate_order(order: Sequence[int], n: int) -> None:
    if len(order) != n:
        raise TourError(f"tour has {len(order)} entries, expected {n}")
    seen = np.zeros(n, dtype=bool)
    for i in order:
        i = int(i)
        if not 0 <= i < n:
            raise TourError(f"city index {i} out of range for n={n}")
        if seen[i]:
            raise TourError(f"city index {i} appears more than once")
        seen[i] = True


def tour_length(inst: Instance, order: Sequence[int]) -> float:
    validate_order(order, inst.n)
    pts = inst.coords[np.asarray(order)]
    return float(np.sqrt(((pts - np.roll(pts, -1, axis=0)) ** 2).sum(-1)).sum())


def batch_tour_lengths(coords: np.ndarray, orders: np.ndarray) -> np.ndarray:
    """Closed-tour lengths for a (batch, n, 2) array and (batch, n) orders; no validation."""
    pts = np.take_along_axis(coords, orders[..., None], axis=1)
    return np.sqrt(((pts - np.roll(pts, -1, axis=1)) ** 2).sum(-1)).sum(-1)


def write_instances(instances: Sequence[Instance], path) -> None:
    if not instances:
        raise ValueError("no instances to write")
    n = instances[0].n
    if any(inst.n != n for inst in instances):
        raise ValueError("all instances in a file must share n")
    lines = [f"{INSTANCE_MAGIC} {FORMAT_VERSION} {len(instances)} {n}"]
    for k, inst in enumerate(instances):
        if k:
            lines.append("")
        lines.extend(f"{x!r} {y!r}" for x, y in inst.coords.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def read_instances(path) -> list[Instance]:
    lines = Path(path).read_text().splitlines()
    if not lines or not any(line.strip() for line in lines):
        raise FormatError("no instances in file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != INSTANCE_MAGIC:
        raise FormatError(f"expected header '{INSTANCE_MAGIC} {FORMAT_VERSION} <count> <n>'", 1)
    if head[1] != FORMAT_VERSION:
        raise FormatError(f"unsupported version {head[1]!r}, expected {FORMAT_VERSION!r}", 1)
    try:
        count, n = int(head[2]), int(head[3])
    except ValueError:
        raise FormatError("count and n must be integers", 1) from None
    if count < 1:
        raise FormatError("no instances in file", 1)

    pos = 1  # index into lines; line number is pos + 1
    out = []
    for k in range(count):
        if k:
            if pos < len(lines) and not lines[pos].strip():
                pos += 1
            elif pos < len(lines):
                raise FormatError(f"expected blank line after instance {k}, found {lines[pos]!r}", pos + 1)
        rows = []
        for _ in range(n):
            if pos >= len(lines) or not lines[pos].strip():
                raise FormatError(f"instance {k} declares n={n} but has only {len(rows)} coordinate lines", pos + 1)
            parts = lines[pos].split()
            if len(parts) != 2:
                raise FormatError(f"expected 'x y', found {lines[pos]!r}", pos + 1)
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise FormatError(f"malformed coordinates {lines[pos]!r}", pos + 1) from None
            pos += 1
        try:
            out.append(Instance(np.array(rows)))
        except ValueError as exc:
            raise FormatError(str(exc), pos) from None
    if any(line.strip() for line in lines[pos:]):
        raise FormatError(f"trailing data after {count} instances", pos + 1)
    return out


def write_tours(tours: Iterable[Tour], path) -> None:
    lines = [f"{TOURS_MAGIC} {FORMAT_VERSION}"]
    for tour in tours:
        lines.append(" ".join(str(i) for i in tour.order) + f" {tour.length!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_tours(path) -> list[Tour]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split() != [TOURS_MAGIC, FORMAT_VERSION]:
        raise FormatError(f"expected header '{TOURS_MAGIC} {FORMAT_VERSION}'", 1)
    tours = []
    for num, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            order = tuple(int(p) for p in parts[:-1])
            length = float(parts[-1])
        except (ValueError, IndexError):
            raise FormatError(f"malformed tour {line!r}", num) from None
        try:
            validate_order(order, len(order))
        except TourError as exc:
            raise FormatError(str(exc), num) from None
        tours.append(Tour(order, length))
    return tours
