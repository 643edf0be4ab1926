"""Weighted digraphs, Laplacians and piecewise-constant switching schedules.

Edge convention: ``adjacency[i, j] > 0`` means node ``i`` receives from
node ``j``.  Rows of the adjacency therefore hold in-degrees and the
Laplacian is ``diag(row sums) - A``.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

BALANCE_TOL = 1e-9


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Digraph:
    """Directed graph with nonnegative edge weights and no self loops."""

    adjacency: np.ndarray

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise GraphError(f"adjacency must be a nonempty square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise GraphError("adjacency has non-finite weights")
        if np.any(a < 0):
            raise GraphError("adjacency has negative weights")
        if np.any(np.diag(a) != 0):
            raise GraphError("adjacency must have a zero diagonal")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def in_degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def out_degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=0)

    def in_neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i] > 0)

    def has_edges(self) -> bool:
        return bool(np.any(self.adjacency > 0))

    def __eq__(self, other):
        if not isinstance(other, Digraph):
            return NotImplemented
        return np.array_equal(self.adjacency, other.adjacency)

    def __hash__(self):
        return hash(self.adjacency.tobytes())

    def __repr__(self):
        return f"Digraph(n_nodes={self.n_nodes}, edges={int(np.count_nonzero(self.adjacency))})"


def laplacian(g: Digraph) -> np.ndarray:
    a = g.adjacency
    return np.diag(a.sum(axis=1)) - a


def is_weight_balanced(g: Digraph, tol: float = BALANCE_TOL) -> bool:
    if tol <= 0:
        raise ValueError("tol must be positive")
    return bool(np.max(np.abs(g.in_degrees() - g.out_degrees())) <= tol)


def strongly_connected_components(g: Digraph) -> list[list[int]]:
    """SCC partition, each component sorted, components ordered by smallest member."""
    n_comp, labels = connected_components(g.adjacency > 0, directed=True, connection="strong")
    comps: list[list[int]] = [[] for _ in range(n_comp)]
    for node, lab in enumerate(labels):
        comps[lab].append(node)
    return sorted(comps, key=lambda c: c[0])


def is_strongly_connected(g: Digraph) -> bool:
    return len(strongly_connected_components(g)) == 1


def union(graphs: Sequence[Digraph]) -> Digraph:
    """Edgewise maximum of weights."""
    if not graphs:
        raise GraphError("union of no graphs")
    return Digraph(np.maximum.reduce([g.adjacency for g in graphs]))


def ring(n: int, weight: float = 1.0) -> Digraph:
    """Directed ring where node i receives from node i+1 (mod n)."""
    a = np.zeros((n, n))
    for i in range(n):
        a[i, (i + 1) % n] = weight
    return Digraph(a)


def complete(n: int, weight: float = 1.0) -> Digraph:
    return Digraph(weight * (np.ones((n, n)) - np.eye(n)))


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    graph: Digraph
    key: int  # index of the graph in SwitchingSchedule.modes


@dataclass(frozen=True, eq=False)
class SwitchingSchedule:
    """Piecewise-constant, right-continuous sequence of graphs.

    ``segments`` holds ``(start_time, graph)`` pairs.  With ``period`` set the
    pattern repeats every ``period`` seconds; otherwise the last graph holds
    forever after its start time.  ``mode_order`` fixes the leading mode
    keys, so keys match a declared mode list even if some never occur.
    """

    segments: tuple[tuple[float, Digraph], ...]
    period: float | None = None
    mode_order: tuple[Digraph, ...] = ()
    modes: tuple[Digraph, ...] = field(init=False)
    _keys: tuple[int, ...] = field(init=False, repr=False)
    _starts: tuple[float, ...] = field(init=False, repr=False)

    def __post_init__(self):
        segs = tuple((float(t), g) for t, g in self.segments)
        if not segs:
            raise GraphError("schedule needs at least one segment")
        if segs[0][0] != 0.0:
            raise GraphError("first segment must start at t = 0")
        starts = [t for t, _ in segs]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise GraphError("segment start times must be strictly increasing")
        n = segs[0][1].n_nodes
        if any(g.n_nodes != n for _, g in segs):
            raise GraphError("all graphs in a schedule must have the same node count")
        if self.period is not None and not (self.period > starts[-1]):
            raise GraphError("period must exceed the last segment start")
        modes: list[Digraph] = []
        for g in self.mode_order:
            if g.n_nodes != n:
                raise GraphError("all graphs in a schedule must have the same node count")
            if g not in modes:
                modes.append(g)
        keys = []
        for _, g in segs:
            if g not in modes:
                modes.append(g)
            keys.append(modes.index(g))
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "modes", tuple(modes))
        object.__setattr__(self, "_keys", tuple(keys))
        object.__setattr__(self, "_starts", tuple(starts))

    @classmethod
    def constant(cls, g: Digraph) -> "SwitchingSchedule":
        return cls(((0.0, g),))

    @classmethod
    def cyclic(cls, modes: Sequence[Digraph], dwell: float) -> "SwitchingSchedule":
        if dwell <= 0:
            raise GraphError("dwell must be positive")
        return cls(tuple((k * dwell, g) for k, g in enumerate(modes)), len(modes) * dwell, tuple(modes))

    @classmethod
    def random(
        cls, modes: Sequence[Digraph], dwell: float, horizon: float, seed: int
    ) -> tuple["SwitchingSchedule", list[int]]:
        """Uniformly random mode every ``dwell`` seconds over ``[0, horizon]``.

        Returns the schedule and the realized mode index sequence.
        """
        if dwell <= 0:
            raise GraphError("dwell must be positive")
        n_seg = max(1, math.ceil(horizon / dwell - 1e-9))
        rng = np.random.default_rng(seed)
        seq = [int(k) for k in rng.integers(len(modes), size=n_seg)]
        segs = tuple((k * dwell, modes[m]) for k, m in enumerate(seq))
        return cls(segs, None, tuple(modes)), seq

    @property
    def n_nodes(self) -> int:
        return self.segments[0][1].n_nodes

    @property
    def is_constant(self) -> bool:
        return len(self.modes) == 1

    def _locate(self, t: float) -> tuple[int, float]:
        """Index of the active segment and the cycle offset for time ``t``."""
        if t < 0:
            raise ValueError("schedule is defined for t >= 0")
        offset = 0.0
        if self.period is not None:
            cycles = math.floor(t / self.period)
            # floor of a rounded quotient can be off by one near cycle edges
            if t - cycles * self.period >= self.period:
                cycles += 1
            elif t - cycles * self.period < 0:
                cycles -= 1
            offset = cycles * self.period
            t = t - offset
        idx = bisect.bisect_right(self._starts, t) - 1
        return idx, offset

    def graph_at(self, t: float) -> Digraph:
        idx, _ = self._locate(t)
        return self.segments[idx][1]

    def key_at(self, t: float) -> int:
        idx, _ = self._locate(t)
        return self._keys[idx]

    def intervals(self, t0: float, t1: float) -> Iterator[Segment]:
        """Constant pieces covering ``[t0, t1]`` in order, each starting where the last ended."""
        idx, offset = self._locate(t0)
        cycle = 0 if self.period is None else round(offset / self.period)
        t = t0
        while t < t1:
            if idx + 1 < len(self.segments):
                end, nxt = self._starts[idx + 1] + offset, idx + 1
            elif self.period is not None:
                end, nxt = (cycle + 1) * self.period, 0
            else:
                end, nxt = math.inf, idx
            end = min(end, t1)
            if end > t:
                yield Segment(t, end, self.segments[idx][1], self._keys[idx])
                t = end
            if nxt == 0 and self.period is not None:
                cycle += 1
                offset = cycle * self.period
            idx = nxt

    def boundaries(self, t0: float, t1: float) -> list[float]:
        return [s.start for s in self.intervals(t0, t1)]


def is_ujsc(s: SwitchingSchedule, window: float, horizon: float) -> bool:
    """Finite-horizon check that every window's union graph is strongly connected.

    Window starts are all switching instants in ``[0, horizon - window]``.
    Periodic schedules need only one period plus one window.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    if horizon < window:
        raise ValueError("horizon must be at least one window")
    if s.period is not None:
        horizon = min(horizon, s.period + window)
    starts = [t for t in s.boundaries(0.0, horizon - window)] or [0.0]
    if horizon - window not in starts:
        starts.append(horizon - window)
    for tk in starts:
        graphs = [seg.graph for seg in s.intervals(tk, tk + window)]
        if not is_strongly_connected(union(graphs)):
            return False
    return True


def min_ujsc_window(s: SwitchingSchedule, horizon: float, step: float | None = None) -> float | None:
    """Smallest window (multiple of ``step``) for which the schedule is UJSC over the horizon.

    A constant strongly connected schedule returns 0.0: every window works.
    """
    if s.is_constant:
        return 0.0 if is_strongly_connected(s.modes[0]) else None
    if step is None:
        starts = s.boundaries(0.0, horizon)
        gaps = np.diff(starts + [horizon])
        step = float(gaps.min()) if len(gaps) else horizon
    k = 1
    while k * step <= horizon + 1e-12:
        w = min(k * step, horizon)
        if is_ujsc(s, w, horizon):
            return w
        k += 1
    return None
