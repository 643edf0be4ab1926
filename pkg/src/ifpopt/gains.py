"""Coupling-gain thresholds, max-consensus, and per-subgraph gain schedules."""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graph import (
    Digraph,
    SwitchingSchedule,
    is_weight_balanced,
    laplacian,
    strongly_connected_components,
)


class GainError(ValueError):
    pass


# --- gain profiles ---------------------------------------------------------

_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd,
)


def compile_expression(expr: str) -> Callable:
    """Compile an arithmetic expression in ``t`` into a numpy-vectorized callable."""
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise GainError(f"cannot parse gain expression {expr!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _NODES):
            raise GainError(f"disallowed syntax {type(node).__name__} in {expr!r}")
        if isinstance(node, ast.Name) and node.id not in _FUNCS and node.id not in _CONSTS and node.id != "t":
            raise GainError(f"unknown name {node.id!r} in {expr!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
            raise GainError(f"only {sorted(_FUNCS)} may be called in {expr!r}")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise GainError(f"non-numeric literal in {expr!r}")
    code = compile(tree, "<gain>", "eval")
    env = {"__builtins__": {}, **_FUNCS, **_CONSTS}

    def fn(t):
        return np.asarray(eval(code, env, {"t": t}), dtype=float) + 0.0 * np.asarray(t, dtype=float)

    return fn


@dataclass(frozen=True, eq=False)
class GainProfile:
    """Scalar gain sigma(t).  ``label`` is the canonical expression text."""

    label: str
    fn: Callable = field(repr=False)
    constant: float | None = None

    @classmethod
    def const(cls, value: float) -> "GainProfile":
        value = float(value)
        return cls(repr(value), lambda t: np.full(np.shape(t), value), value)

    @classmethod
    def sinusoid(cls, offset: float, amplitude: float, frequency: float = 1.0, phase: float = 0.0) -> "GainProfile":
        label = f"{offset!r} + {amplitude!r}*sin({frequency!r}*t + {phase!r})"
        return cls(label, lambda t: offset + amplitude * np.sin(frequency * np.asarray(t) + phase))

    @classmethod
    def expression(cls, expr: str) -> "GainProfile":
        return cls(expr, compile_expression(expr))

    def __call__(self, t):
        if self.constant is not None and np.ndim(t) == 0:
            return self.constant
        out = self.fn(t)
        return float(out) if np.ndim(out) == 0 else out

    @property
    def is_constant(self) -> bool:
        return self.constant is not None


# --- thresholds ------------------------------------------------------------

def _require_balanced(g: Digraph):
    if not is_weight_balanced(g):
        raise GainError("graph is not weight-balanced")


def sigma_threshold_eigen(g: Digraph, nu_bar: float) -> float:
    """Eigenvalue bound s_+(L + L^T) / (-2 nu_bar s_max(L^T L))."""
    if not nu_bar < 0:
        raise GainError("nu_bar must be negative")
    _require_balanced(g)
    L = laplacian(g)
    if not np.any(L):
        raise GainError("all-zero Laplacian has no threshold")
    sym = np.linalg.eigvalsh(L + L.T)
    gram = np.linalg.eigvalsh(L.T @ L)
    cutoff = 1e-9 * max(1.0, sym[-1])
    s_plus = sym[sym > cutoff].min()
    return float(s_plus / (-2.0 * nu_bar * gram[-1]))


def sigma_threshold_degree(degrees: Sequence[float], nus: Sequence[float]) -> float:
    """Degree bound 1 / (2 max_i d_i |nu_i|)."""
    degrees = np.asarray(degrees, dtype=float)
    nus = np.asarray(nus, dtype=float)
    if degrees.shape != nus.shape:
        raise GainError("degrees and nus must have the same length")
    if np.any(nus > 0):
        raise GainError("IFP indices must be <= 0")
    worst = float(np.max(degrees * np.abs(nus)))
    if worst == 0.0:
        raise GainError("every d_i |nu_i| is zero; the threshold is unbounded")
    return 1.0 / (2.0 * worst)


def max_consensus(g: Digraph, values: Sequence[float], max_iters: int) -> np.ndarray:
    """Synchronous max-consensus D_i <- max(D_i, max over in-neighbors D_j)."""
    d = np.asarray(values, dtype=float).copy()
    if d.shape != (g.n_nodes,):
        raise GainError("one value per node required")
    nbrs = [g.in_neighbors(i) for i in range(g.n_nodes)]
    for _ in range(max_iters):
        nxt = np.array([max(d[i], d[nb].max()) if len(nb) else d[i] for i, nb in enumerate(nbrs)])
        if np.array_equal(nxt, d):
            break
        d = nxt
    return d


def max_consensus_threshold(g: Digraph, local: Sequence[float], max_iters: int | None = None) -> np.ndarray:
    """Per-agent estimate of the degree bound after max-consensus on ``d_i |nu_i|``."""
    if max_iters is None:
        max_iters = g.n_nodes
    if max_iters < g.n_nodes:
        raise GainError("max_iters must be at least the node count")
    d = max_consensus(g, local, max_iters)
    with np.errstate(divide="ignore"):
        return np.where(d > 0, 1.0 / (2.0 * np.where(d > 0, d, 1.0)), np.inf)


# --- reports ---------------------------------------------------------------

@dataclass
class ThresholdReport:
    sigma_eig: float
    sigma_deg: float
    per_graph: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"sigma_eig": self.sigma_eig, "sigma_deg": self.sigma_deg, "per_graph": self.per_graph}


def threshold_report(schedule: SwitchingSchedule, nus: Sequence[float]) -> ThresholdReport:
    """Both bounds for every distinct graph of the schedule; the overall values are the minima."""
    nus = np.asarray(nus, dtype=float)
    nu_bar = float(nus.min())
    rows = []
    for key, g in enumerate(schedule.modes):
        row = {
            "mode": key,
            "balanced": is_weight_balanced(g),
            "sccs": strongly_connected_components(g),
            "in_degrees": g.in_degrees().tolist(),
            "sigma_eig": None,
            "sigma_deg": None,
        }
        if row["balanced"] and g.has_edges() and nu_bar < 0:
            row["sigma_eig"] = sigma_threshold_eigen(g, nu_bar)
            row["sigma_deg"] = sigma_threshold_degree(g.in_degrees(), nus)
        rows.append(row)
    eig = [r["sigma_eig"] for r in rows if r["sigma_eig"] is not None]
    deg = [r["sigma_deg"] for r in rows if r["sigma_deg"] is not None]
    return ThresholdReport(min(eig) if eig else math.inf, min(deg) if deg else math.inf, rows)


# --- gain schedules --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GainSchedule:
    """Per-agent gains sigma_i(t).

    ``assignment`` maps a schedule mode key to one profile index per agent;
    ``None`` means every agent uses ``profiles[0]`` at all times.
    """

    kind: str
    profiles: tuple[GainProfile, ...]
    n_agents: int
    assignment: dict[int, tuple[int, ...]] | None = None

    @classmethod
    def shared(cls, profile: GainProfile, n_agents: int) -> "GainSchedule":
        kind = "constant" if profile.is_constant else "sinusoidal"
        return cls(kind, (profile,), n_agents)

    def profile_indices(self, mode_key: int | None) -> tuple[int, ...]:
        if self.assignment is None:
            return (0,) * self.n_agents
        return self.assignment[mode_key]

    def evaluate(self, t: float, mode_key: int | None = None) -> np.ndarray:
        idx = self.profile_indices(mode_key)
        vals = [p(t) for p in self.profiles]
        return np.array([vals[k] for k in idx], dtype=float)

    def is_constant_on(self, mode_key: int | None) -> bool:
        return all(self.profiles[k].is_constant for k in set(self.profile_indices(mode_key)))


def assign_subgraph_gains(
    schedule: SwitchingSchedule,
    nus: Sequence[float],
    profiles: Sequence[GainProfile],
    horizon: float,
    anchors: Sequence[int] | None = None,
    check: bool = True,
) -> GainSchedule:
    """One shared profile per strongly connected component of every mode.

    Profile ``k`` goes to the component holding agent ``anchors[k]``; other
    components take the unclaimed profiles in order (the last one repeats
    when they run out).  With ``check`` set, each profile is verified against
    its component's degree bound at 1000 samples plus endpoints per segment.
    """
    if not profiles:
        raise GainError("at least one profile is required")
    n = schedule.n_nodes
    nus = np.asarray(nus, dtype=float)
    anchors = list(anchors or [])
    assignment: dict[int, tuple[int, ...]] = {}
    for key, g in enumerate(schedule.modes):
        _require_balanced(g)
        comps = strongly_connected_components(g)
        owner: dict[int, int] = {}
        claimed = set()
        for k, a in enumerate(anchors[: len(profiles)]):
            ci = next(ci for ci, c in enumerate(comps) if a in c)
            if ci not in owner:
                owner[ci] = k
                claimed.add(k)
        free = [k for k in range(len(profiles)) if k not in claimed] or [len(profiles) - 1]
        j = 0
        for ci in range(len(comps)):
            if ci not in owner:
                owner[ci] = free[min(j, len(free) - 1)]
                j += 1
        idx = [0] * n
        for ci, comp in enumerate(comps):
            for node in comp:
                idx[node] = owner[ci]
        assignment[key] = tuple(idx)
    gs = GainSchedule("per_subgraph", tuple(profiles), n, assignment)
    if check:
        violations = check_admissible(schedule, gs, nus, horizon)
        if violations:
            raise GainError("; ".join(violations[:3]))
    return gs


def component_bounds(g: Digraph, nus: np.ndarray) -> list[tuple[list[int], float]]:
    d = g.in_degrees()
    out = []
    for comp in strongly_connected_components(g):
        worst = float(np.max(d[comp] * np.abs(nus[comp])))
        out.append((comp, math.inf if worst == 0 else 1.0 / (2.0 * worst)))
    return out


def check_admissible(
    schedule: SwitchingSchedule, gains: GainSchedule, nus: Sequence[float], horizon: float, samples: int = 1000
) -> list[str]:
    """Violations of the per-component degree bound and the shared-gain rule over ``[0, horizon]``.

    An empty list means the gains are admissible for the first algorithm.
    """
    nus = np.asarray(nus, dtype=float)
    problems = []
    bounds_by_mode = {k: component_bounds(g, nus) for k, g in enumerate(schedule.modes)}
    checked_constant = set()
    for seg in schedule.intervals(0.0, horizon):
        idx = gains.profile_indices(seg.key)
        if gains.is_constant_on(seg.key):
            if seg.key in checked_constant:
                continue
            checked_constant.add(seg.key)
            ts = np.array([seg.start])
        else:
            ts = np.concatenate([np.linspace(seg.start, seg.end, samples), [seg.start, seg.end]])
        values = {k: np.atleast_1d(gains.profiles[k](ts)) for k in set(idx)}
        for comp, bound in bounds_by_mode[seg.key]:
            ks = {idx[i] for i in comp}
            if len(ks) > 1:
                problems.append(
                    f"agents {comp} share a component in mode {seg.key} but use different gain profiles"
                )
                continue
            v = values[ks.pop()]
            if np.any(v <= 0):
                problems.append(f"gain not positive for agents {comp} on [{seg.start:g}, {seg.end:g}]")
            elif np.any(v >= bound):
                problems.append(
                    f"degree-based gain bound violated for agents {comp} on [{seg.start:g}, {seg.end:g}]: "
                    f"max sigma = {v.max():.6g} >= 1/(2 max d|nu|) = {bound:.6g}"
                )
        if len(problems) > 20:
            break
    return problems


def check_positive(schedule: SwitchingSchedule, gains: GainSchedule, horizon: float, samples: int = 1000) -> list[str]:
    problems = []
    for seg in schedule.intervals(0.0, horizon):
        ts = np.linspace(seg.start, seg.end, samples)
        for k in set(gains.profile_indices(seg.key)):
            if np.any(np.atleast_1d(gains.profiles[k](ts)) <= 0):
                problems.append(
                    f"gain profile {gains.profiles[k].label!r} not positive on [{seg.start:g}, {seg.end:g}]"
                )
        if len(problems) > 20:
            break
    return problems
