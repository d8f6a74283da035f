"""Sensor selections over the candidate segments (every state is a candidate)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class SensorSelection:
    """Binary sensor indicator ``gamma`` over ``p`` candidate segments.

    Indices exposed by :attr:`indices` are 0-based state indices; segment
    numbers written to files are 1-based.
    """

    gamma: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma)
        if g.ndim != 1:
            raise ValueError("gamma must be a vector")
        if not np.all((g == 0) | (g == 1)):
            raise ValueError("gamma entries must be 0 or 1")
        g = g.astype(bool)
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SensorSelection):
            return NotImplemented
        return self.gamma.shape == other.gamma.shape and bool(np.all(self.gamma == other.gamma))

    def __hash__(self) -> int:
        return hash(self.gamma.tobytes())

    @classmethod
    def from_indices(cls, p: int, indices) -> "SensorSelection":
        g = np.zeros(p, dtype=bool)
        idx = np.asarray(list(indices), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= p):
            raise ValueError(f"sensor index out of range 0..{p - 1}")
        if len(set(idx.tolist())) != idx.size:
            raise ValueError("duplicate sensor index")
        g[idx] = True
        return cls(g)

    @classmethod
    def full(cls, p: int) -> "SensorSelection":
        return cls(np.ones(p, dtype=bool))

    @classmethod
    def empty(cls, p: int) -> "SensorSelection":
        return cls(np.zeros(p, dtype=bool))

    @property
    def p(self) -> int:
        return self.gamma.size

    @property
    def r(self) -> int:
        return int(self.gamma.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.gamma)

    @property
    def segments(self) -> list[int]:
        """1-based segment numbers."""
        return [int(i) + 1 for i in self.indices]

    def C_reduced(self) -> np.ndarray:
        """Reduced output matrix: nonzero rows of ``Gamma C`` with ``C = I``."""
        return np.eye(self.p)[self.indices]

    def union(self, other: "SensorSelection") -> "SensorSelection":
        return SensorSelection(self.gamma | other.gamma)

    def __le__(self, other: "SensorSelection") -> bool:
        return bool(np.all(~self.gamma | other.gamma))


def write_selection_csv(path, sel: SensorSelection, contributions=None) -> None:
    """Write ``rank, segment_index, contribution`` rows (1-based segments)."""
    contributions = np.zeros(sel.p) if contributions is None else np.asarray(contributions)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "segment_index", "contribution"])
        order = sorted(sel.indices, key=lambda i: (-contributions[i], i))
        for rank, i in enumerate(order, start=1):
            w.writerow([rank, int(i) + 1, f"{contributions[i]:.12g}"])


def read_selection_csv(path, p: int) -> SensorSelection:
    """Read a selection from a CSV with a ``segment_index`` column (1-based)."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "segment_index" not in rows[0]:
        raise ValueError(f"{path}: expected a 'segment_index' column")
    return SensorSelection.from_indices(p, [int(r["segment_index"]) - 1 for r in rows])
