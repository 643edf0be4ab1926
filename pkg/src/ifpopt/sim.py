"""Fixed-step RK4 integration aligned to switching instants, with run metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .dynamics import CompiledDynamics, Network, NetworkState, OptimalPoint, optimal_point, rk4_affine_map
from .gains import GainSchedule, check_admissible, check_positive
from .graph import SwitchingSchedule
from .passivity import storage_value


class SimulationError(ValueError):
    pass


@dataclass
class SimConfig:
    dt: float = 1e-3
    t_end: float = 100.0
    record_every: int = 10
    algorithm: str = "alg1"
    monitor_lyapunov: bool = True
    monitor_passivity: bool = False
    allow_inadmissible_gain: bool = False
    divergence_norm: float = 1e9
    divergence_growth: float = 10.0

    def __post_init__(self):
        if not self.dt > 0:
            raise SimulationError("dt must be positive")
        if not self.t_end > 0:
            raise SimulationError("t_end must be positive")
        if self.record_every < 1:
            raise SimulationError("record_every must be >= 1")
        if self.algorithm not in ("alg1", "alg2"):
            raise SimulationError(f"unknown algorithm {self.algorithm!r}")


@dataclass
class Problem:
    """Everything the integrator needs besides the initial state.

    ``network`` agents carry the design indices ``nu`` (used by the
    derivative-feedback loop and by gain admissibility) and the storage
    parameters ``eta``.  ``certified_nus`` are the indices certified for
    those ``eta`` values, used by the passivity monitor.
    """

    network: Network
    schedule: SwitchingSchedule
    gains: GainSchedule
    optimum: OptimalPoint | None = None
    certified_nus: np.ndarray | None = None

    def __post_init__(self):
        if self.schedule.n_nodes != self.network.n:
            raise SimulationError("schedule and network disagree on the number of agents")
        if self.gains.n_agents != self.network.n:
            raise SimulationError("gain schedule and network disagree on the number of agents")
        if self.optimum is None:
            self.optimum = optimal_point(self.network)


@dataclass
class PassivityCheck:
    steps: int = 0
    violations: int = 0
    max_excess: float = -math.inf
    tolerance_per_step: float = 0.0


@dataclass
class Trajectory:
    n: int
    m: int
    times: np.ndarray
    states: np.ndarray
    consensus_error: np.ndarray
    optimality_gap: np.ndarray
    lyapunov: np.ndarray
    multiplier_invariant: np.ndarray
    dt: float
    steps: int
    diverged: bool = False
    divergence_reason: str | None = None
    passivity: PassivityCheck | None = None
    extras: dict = field(default_factory=dict)

    @property
    def x(self) -> np.ndarray:
        return self.states[:, : self.n * self.m].reshape(-1, self.n, self.m)

    @property
    def lam(self) -> np.ndarray:
        return self.states[:, self.n * self.m:].reshape(-1, self.n, self.m)

    def state(self, k: int = -1) -> NetworkState:
        return NetworkState.unflat(self.states[k], self.n, self.m, float(self.times[k]))


class StorageEvaluator:
    """Per-agent storage values about a fixed optimal point, evaluated for all agents at once.

    Agrees with :func:`ifpopt.passivity.storage_value` agent by agent; the
    constants that depend only on the optimum are computed once.
    """

    def __init__(self, net: Network, opt: OptimalPoint):
        if any(p.eta is None for p in net.agents):
            raise SimulationError("every agent needs a storage parameter eta")
        self.net = net
        n, m = net.n, net.m
        self.x_star = opt.x_star
        self.lam_star = opt.lam_star
        self.eta = np.array([p.eta for p in net.agents])
        self.g_star = net.gradients(np.tile(opt.x_star, (n, 1)))
        self.c = net.alpha / net.gamma
        self._quad = net._Qb is not None
        if self._quad:
            self._Qb, self._cb = net._Qb, net._cb
            self.f_star = None
        else:
            self.f_star = np.array([f.value(opt.x_star) for f in net.objectives])

    def _gradients(self, X: np.ndarray) -> np.ndarray:
        net = self.net
        if self._quad:
            return ((X.reshape(len(X), -1) - self._cb) @ self._Qb.T).reshape(X.shape)
        return np.array([net.gradients(x) for x in X])

    def _value_drop(self, X: np.ndarray) -> np.ndarray:
        """f_i(x*) - f_i(x_i) for every sample and agent."""
        B, n, m = X.shape
        if self._quad:
            Q = self._Qb
            d = X.reshape(B, -1) - self._cb
            ds = np.tile(self.x_star, n) - self._cb
            return 0.5 * ((ds * (Q @ ds)) - d * (d @ Q.T)).reshape(B, n, m).sum(axis=2)
        fs = self.net.objectives
        return self.f_star - np.array([[f.value(xi) for f, xi in zip(fs, x)] for x in X])

    def batch(self, X: np.ndarray, L: np.ndarray) -> np.ndarray:
        """Storage values for stacked samples ``X, L`` of shape (B, N, m); returns (B, N)."""
        net = self.net
        B, n, m = X.shape
        dx = X - self.x_star
        k_dlam = ((L - self.lam_star).reshape(B, -1) @ net.Kb.T).reshape(B, n, m)
        z = net.alpha * (self._gradients(X) - self.g_star) + k_dlam
        return (
            0.5 * self.eta * np.einsum("bij,bij->bi", z, z)
            - np.einsum("bij,bij->bi", dx, k_dlam) / net.gamma
            + self.c * (self._value_drop(X) + np.einsum("ij,bij->bi", self.g_star, dx))
        )

    def __call__(self, x: np.ndarray, lam: np.ndarray) -> np.ndarray:
        return self.batch(x[None], lam[None])[0]


def lyapunov_value(net: Network, opt: OptimalPoint, x: np.ndarray, lam: np.ndarray) -> float:
    return float(sum(
        storage_value(p, f, x[i], lam[i], opt.x_star, opt.lam_star[i]).value
        for i, (p, f) in enumerate(zip(net.agents, net.objectives))
    ))


def _supply(net: Network, opt: OptimalPoint, X: np.ndarray, U: np.ndarray, nus: np.ndarray) -> np.ndarray:
    """y_i^T u_i - nu_i |u_i|^2 with y_i = C (x_i - x*), for stacked samples (B, N, m)."""
    Y = (X - opt.x_star) @ net.C.T
    return np.einsum("bij,bij->bi", Y, U) - nus * np.einsum("bij,bij->bi", U, U)


class _PassivityBuffer:
    """Collects steps and checks the per-agent dissipation inequality in vectorized chunks.

    Over a step of length h the storage increase must not exceed the
    trapezoidal integral of the supply rate by more than the tolerance.
    """

    chunk = 4096

    def __init__(self, storage: StorageEvaluator, net: Network, opt: OptimalPoint, nus, check: PassivityCheck, y0):
        self.storage, self.net, self.opt, self.nus, self.check = storage, net, opt, np.asarray(nus), check
        self.ys, self.u0, self.u1, self.h = [y0], [], [], []

    def add(self, y_new, u0, u1, h):
        self.ys.append(y_new)
        self.u0.append(u0)
        self.u1.append(u1)
        self.h.append(h)
        if len(self.h) >= self.chunk:
            self.flush()

    def flush(self):
        if not self.h:
            return
        n, m = self.net.n, self.net.m
        nm = n * m
        Y = np.array(self.ys)
        X = Y[:, :nm].reshape(-1, n, m)
        V = self.storage.batch(X, Y[:, nm:].reshape(-1, n, m))
        s0 = _supply(self.net, self.opt, X[:-1], np.array(self.u0).reshape(-1, n, m), self.nus)
        s1 = _supply(self.net, self.opt, X[1:], np.array(self.u1).reshape(-1, n, m), self.nus)
        excess = np.diff(V, axis=0) - 0.5 * np.array(self.h)[:, None] * (s0 + s1)
        c = self.check
        c.steps += len(self.h)
        c.max_excess = max(c.max_excess, float(excess.max()))
        c.violations += int(np.sum(excess > c.tolerance_per_step))
        self.ys, self.u0, self.u1, self.h = [Y[-1]], [], [], []


def _growth_diverged(gap: np.ndarray, factor: float) -> bool:
    if len(gap) < 20:
        return False
    chunks = np.array_split(gap, 10)
    peaks = np.array([c.max() for c in chunks])
    return bool(peaks[-1] > 1e-8 and peaks[-1] >= factor * peaks[:-1].min())


def integrate(config: SimConfig, problem: Problem, init: NetworkState) -> Trajectory:
    """Classic RK4 with fixed step ``dt``; steps are truncated to land on switching instants.

    Divergence (non-finite state or norm above ``divergence_norm``) truncates
    the run and sets the flag instead of raising.  A run whose optimality
    gap envelope grows by ``divergence_growth`` is also flagged.
    """
    net = problem.network
    opt = problem.optimum
    n, m = net.n, net.m
    if init.x.shape != (n, m):
        raise SimulationError(f"initial state has shape {init.x.shape}, expected {(n, m)}")
    if np.linalg.norm(net.multiplier_sum(init.lam)) > 1e-10:
        raise SimulationError("initial condition sum_i K_i lam_i(0) = 0 violated")
    if config.algorithm == "alg1":
        problems = check_admissible(problem.schedule, problem.gains, net.nus, config.t_end)
    else:
        problems = check_positive(problem.schedule, problem.gains, config.t_end)
    if problems and not config.allow_inadmissible_gain:
        raise SimulationError("inadmissible coupling gain: " + "; ".join(problems[:3]))

    comp = CompiledDynamics(net, config.algorithm)
    ks0 = net.multiplier_sum(init.lam)
    nm = n * m
    dt = config.dt

    times, states = [], []

    def record(t, y):
        times.append(t)
        states.append(y.copy())

    check = None
    storage = StorageEvaluator(net, opt) if (config.monitor_passivity or config.monitor_lyapunov) else None

    # quadratic objectives with constant gains: each RK4 step is an affine map
    maps: dict = {}
    y = init.flat()
    record(0.0, y)
    if config.monitor_passivity:
        cert = problem.certified_nus if problem.certified_nus is not None else net.nus
        check = PassivityCheck(tolerance_per_step=1e-6 * dt)
        pbuf = _PassivityBuffer(storage, net, opt, cert, check, y)
    step = 0
    diverged, reason = False, None
    t = 0.0
    for seg in problem.schedule.intervals(0.0, config.t_end):
        g = seg.graph
        const = problem.gains.is_constant_on(seg.key)
        lin = None
        if const:
            G_const = comp.input_operator(seg.key, g, problem.gains.evaluate(seg.start, seg.key), cache=True)
            lin = comp.affine(G_const)
        n_steps = max(1, math.ceil((seg.end - seg.start) / dt - 1e-6))
        for k in range(n_steps):
            t0 = seg.start + k * dt
            last = k == n_steps - 1
            h = (seg.end - t0) if last else dt
            if lin is not None:
                mk = (id(G_const), h)
                if mk not in maps:
                    maps[mk] = rk4_affine_map(lin[0], lin[1], h)
                P, q = maps[mk]
                y_new = P @ y + q
                G1 = G4 = G_const
            elif const:
                G1 = G2 = G4 = G_const
            else:
                sig = problem.gains.evaluate
                G1 = comp.input_operator(seg.key, g, sig(t0, seg.key), cache=False)
                G2 = comp.input_operator(seg.key, g, sig(t0 + 0.5 * h, seg.key), cache=False)
                G4 = comp.input_operator(seg.key, g, sig(t0 + h, seg.key), cache=False)
            if lin is None:
                k1 = comp(y, G1)
                k2 = comp(y + 0.5 * h * k1, G2)
                k3 = comp(y + 0.5 * h * k2, G2)
                k4 = comp(y + h * k3, G4)
                y_new = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t = seg.end if last else t0 + h
            step += 1
            if not np.all(np.isfinite(y_new)) or np.max(np.abs(y_new)) > config.divergence_norm:
                diverged, reason = True, f"state norm exceeded {config.divergence_norm:g} at t = {t:.6g}"
                break
            if check is not None:
                pbuf.add(y_new, G1 @ y[:nm], G4 @ y_new[:nm], h)
            y = y_new
            if step % config.record_every == 0:
                record(t, y)
        if diverged:
            break
    if times[-1] != t and not diverged:
        record(t, y)
    if check is not None:
        pbuf.flush()

    times_a = np.array(times)
    states_a = np.array(states)
    xs = states_a[:, :nm].reshape(-1, n, m)
    lams = states_a[:, nm:].reshape(-1, n, m)
    diffs = xs[:, :, None, :] - xs[:, None, :, :]
    consensus = np.sqrt((diffs ** 2).sum(axis=-1)).max(axis=(1, 2))
    gap = np.sqrt(((xs - opt.x_star) ** 2).sum(axis=-1)).max(axis=1)
    inv = np.array([np.linalg.norm(net.multiplier_sum(l) - ks0) for l in lams])
    if config.monitor_lyapunov:
        lyap = storage.batch(xs, lams).sum(axis=1)
    else:
        lyap = np.full(len(times_a), np.nan)
    if not diverged and _growth_diverged(gap, config.divergence_growth):
        diverged, reason = True, f"optimality gap envelope grew by >= {config.divergence_growth:g}x"
    return Trajectory(n, m, times_a, states_a, consensus, gap, lyap, inv, dt, step, diverged, reason, check)


@dataclass
class LyapunovReport:
    max_increment: float
    violations: int
    samples: int

    def to_dict(self):
        return {"max_increment": self.max_increment, "violations": self.violations, "samples": self.samples}


def monitor_lyapunov(traj: Trajectory, tol_per_step: float | None = None) -> LyapunovReport:
    """Largest increase of the summed storage between records, and how many exceed tolerance."""
    v = traj.lyapunov
    if len(v) < 2 or np.all(np.isnan(v)):
        return LyapunovReport(0.0, 0, len(v))
    tol = 1e-6 * traj.dt if tol_per_step is None else tol_per_step
    inc = np.diff(v)
    steps = np.maximum(1.0, np.round(np.diff(traj.times) / traj.dt))
    return LyapunovReport(float(max(inc.max(), 0.0)), int(np.sum(inc > tol * steps)), len(v))


def csv_header(n: int, m: int) -> list[str]:
    nm = n * m
    return (
        ["t"]
        + [f"x_{k + 1}" for k in range(nm)]
        + [f"lam_{k + 1}" for k in range(nm)]
        + ["consensus_error", "optimality_gap", "lyapunov", "multiplier_invariant"]
    )


def write_csv(traj: Trajectory, fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(csv_header(traj.n, traj.m))
    fmt = lambda v: format(float(v), ".17g")
    for k in range(len(traj.times)):
        w.writerow(
            [fmt(traj.times[k])]
            + [fmt(v) for v in traj.states[k]]
            + [fmt(traj.consensus_error[k]), fmt(traj.optimality_gap[k]),
               fmt(traj.lyapunov[k]), fmt(traj.multiplier_invariant[k])]
        )


def summarize(traj: Trajectory, problem: Problem) -> dict:
    lyap = monitor_lyapunov(traj)
    x_final = traj.x[-1]
    out = {
        "t_final": float(traj.times[-1]),
        "steps": traj.steps,
        "final_gap": float(traj.optimality_gap[-1]),
        "final_consensus_error": float(traj.consensus_error[-1]),
        "consensus_value": x_final.mean(axis=0).tolist(),
        "x_star": problem.optimum.x_star.tolist(),
        "diverged": traj.diverged,
        "divergence_reason": traj.divergence_reason,
        "max_multiplier_invariant": float(np.max(traj.multiplier_invariant)),
        "lyapunov": lyap.to_dict(),
        "violation_count": lyap.violations,
    }
    if traj.passivity is not None:
        p = traj.passivity
        out["passivity"] = {"steps": p.steps, "violations": p.violations, "max_excess": p.max_excess}
    return out
