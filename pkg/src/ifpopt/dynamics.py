"""Closed-loop vector fields of the two distributed algorithms.

State layout: ``x`` and ``lam`` are ``(N, m)`` arrays, one row per agent.
Flattened vectors stack agent blocks, matching ``kron(L, I_m)`` operators.

``alg1`` (plain diffusive coupling of ``C x_i``) and ``alg2``
(coupling of the passivated outputs ``C x_i - nu_i u_i``) share the
agent dynamics

    dx_i/dt   = -alpha grad f_i(x_i) - K_i lam_i + beta u_i
    dlam_i/dt = -gamma J_i u_i

and differ only in how the input ``u_i`` is formed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .graph import Digraph, laplacian
from .objective import ObjectiveFunction
from .passivity import AgentParams

ALGORITHMS = ("alg1", "alg2")


class DynamicsError(ValueError):
    pass


class SingularLoopError(DynamicsError):
    """The derivative-feedback algebraic loop has no unique solution."""


@dataclass(frozen=True)
class NetworkState:
    x: np.ndarray
    lam: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        if x.shape != lam.shape:
            raise DynamicsError(f"x and lam shapes differ: {x.shape} vs {lam.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))):
            raise DynamicsError("state has non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def from_scalars(cls, x, lam=None, t: float = 0.0) -> "NetworkState":
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        lam = np.zeros_like(x) if lam is None else np.asarray(lam, dtype=float).reshape(x.shape)
        return cls(x, lam, t)

    @property
    def n_agents(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.x.ravel(), self.lam.ravel()])

    @classmethod
    def unflat(cls, y: np.ndarray, n: int, m: int, t: float = 0.0) -> "NetworkState":
        return cls(y[: n * m].reshape(n, m), y[n * m:].reshape(n, m), t)


@dataclass(frozen=True)
class OptimalPoint:
    x_star: np.ndarray
    lam_star: np.ndarray  # (N, m)


class Network:
    """Agents plus their local objectives, with stacked block operators."""

    def __init__(self, agents: Sequence[AgentParams], objectives: Sequence[ObjectiveFunction]):
        if len(agents) != len(objectives) or not agents:
            raise DynamicsError("need one objective per agent and at least one agent")
        a0 = agents[0]
        for p in agents[1:]:
            if (p.alpha, p.beta, p.gamma) != (a0.alpha, a0.beta, a0.gamma) or not np.array_equal(p.C, a0.C):
                raise DynamicsError("alpha, beta, gamma and C must be shared by all agents")
        m = a0.dim
        if any(f.dim != m for f in objectives):
            raise DynamicsError("objective dimension does not match C")
        self.agents = tuple(agents)
        self.objectives = tuple(objectives)
        self.n = len(agents)
        self.m = m
        self.alpha, self.beta, self.gamma = a0.alpha, a0.beta, a0.gamma
        self.C = a0.C
        self.Kb = sla.block_diag(*[p.K for p in agents])
        self.Jb = sla.block_diag(*[p.J for p in agents])
        self.Jinvb = sla.block_diag(*[np.linalg.inv(p.J) for p in agents])
        self.Cb = np.kron(np.eye(self.n), self.C)
        if all(f.is_quadratic for f in objectives):
            self._Qb = sla.block_diag(*[f.quadratic[0] for f in objectives])
            self._cb = np.concatenate([f.quadratic[1] for f in objectives])
        else:
            self._Qb = None
        self._sgrads = None
        if m == 1 and all(f.scalar_gradient is not None for f in objectives):
            self._sgrads = tuple(f.scalar_gradient for f in objectives)

    @property
    def nus(self) -> np.ndarray:
        if any(p.nu is None for p in self.agents):
            raise DynamicsError("IFP indices are not set on every agent")
        return np.array([p.nu for p in self.agents], dtype=float)

    def with_agents(self, agents: Sequence[AgentParams]) -> "Network":
        return Network(agents, self.objectives)

    def gradients_flat(self, xf: np.ndarray) -> np.ndarray:
        if self._Qb is not None:
            return self._Qb @ (xf - self._cb)
        if self._sgrads is not None:
            return np.array([g(v) for g, v in zip(self._sgrads, xf.tolist())])
        m = self.m
        return np.concatenate([f.gradient(xf[i * m:(i + 1) * m]) for i, f in enumerate(self.objectives)])

    def gradients(self, x: np.ndarray) -> np.ndarray:
        return self.gradients_flat(x.ravel()).reshape(self.n, self.m)

    def lift(self, L: np.ndarray) -> np.ndarray:
        return np.kron(L, np.eye(self.m))

    def multiplier_sum(self, lam: np.ndarray) -> np.ndarray:
        """sum_i K_i lam_i, the first integral of both flows."""
        return (self.Kb @ lam.ravel()).reshape(self.n, self.m).sum(axis=0)


def _sigma_rows(sigma, n: int, m: int) -> np.ndarray:
    s = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
    return np.repeat(s, m)


def centralized_optimum(
    fs: Sequence[ObjectiveFunction],
    x0,
    alpha: float = 1.0,
    K: Sequence[np.ndarray] | None = None,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> OptimalPoint:
    """Newton iteration on sum_i grad f_i(x) = 0, then lam_i* = -K_i^{-1} alpha grad f_i(x*)."""
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    for _ in range(max_iter):
        g = sum(f.gradient(x) for f in fs)
        if np.linalg.norm(g) <= tol:
            break
        H = sum(np.atleast_2d(f.hessian(x)) for f in fs)
        x = x - np.linalg.solve(H, g)
    else:
        g = sum(f.gradient(x) for f in fs)
        if np.linalg.norm(g) > tol:
            raise DynamicsError(f"Newton did not converge: residual {np.linalg.norm(g):.3e}")
    m = x.shape[0]
    K = [np.eye(m)] * len(fs) if K is None else K
    lam = np.array([-np.linalg.solve(Ki, alpha * f.gradient(x)) for Ki, f in zip(K, fs)])
    return OptimalPoint(x, lam)


def optimal_point(net: Network, x0=None) -> OptimalPoint:
    x0 = np.zeros(net.m) if x0 is None else x0
    return centralized_optimum(net.objectives, x0, net.alpha, [p.K for p in net.agents])


# --- alg1: output coupling -------------------------------------------------

def alg1_input(state: NetworkState, net: Network, g: Digraph, sigma) -> np.ndarray:
    """u_i = sigma_i sum_j a_ij (C x_j - C x_i)."""
    L = net.lift(laplacian(g))
    u = -_sigma_rows(sigma, net.n, net.m) * (L @ (net.Cb @ state.x.ravel()))
    return u.reshape(net.n, net.m)


def _agent_dynamics(state: NetworkState, net: Network, u: np.ndarray):
    grad = net.gradients(state.x)
    klam = (net.Kb @ state.lam.ravel()).reshape(net.n, net.m)
    dx = -net.alpha * grad - klam + net.beta * u
    dlam = -net.gamma * (net.Jb @ u.ravel()).reshape(net.n, net.m)
    return dx, dlam


def alg1_rhs(state: NetworkState, net: Network, g: Digraph, sigma) -> tuple[np.ndarray, np.ndarray]:
    return _agent_dynamics(state, net, alg1_input(state, net, g, sigma))


def alg1_rhs_per_agent(state: NetworkState, net: Network, g: Digraph, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Reference evaluation agent by agent, straight from the local update rules."""
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (net.n,))
    a = g.adjacency
    dx = np.zeros_like(state.x)
    dlam = np.zeros_like(state.lam)
    for i, (p, f) in enumerate(zip(net.agents, net.objectives)):
        u = np.zeros(net.m)
        for j in range(net.n):
            if a[i, j] > 0:
                u += a[i, j] * (p.C @ state.x[j] - p.C @ state.x[i])
        u *= sig[i]
        dx[i] = -p.alpha * f.gradient(state.x[i]) - p.K @ state.lam[i] + p.beta * u
        dlam[i] = -p.gamma * p.J @ u
    return dx, dlam


# --- alg2: derivative feedback ---------------------------------------------

def loop_matrix(net: Network, L: np.ndarray, sigma, nus) -> np.ndarray:
    """M = I - J S L nu J^{-1} (block form, S = diag sigma_i)."""
    n, m = net.n, net.m
    S = np.diag(_sigma_rows(sigma, n, m))
    nu = np.diag(np.repeat(np.asarray(nus, dtype=float), m))
    return np.eye(n * m) - net.Jb @ S @ net.lift(L) @ nu @ net.Jinvb


def _loop_rhs(net: Network, L: np.ndarray, sigma, xf: np.ndarray) -> np.ndarray:
    S = _sigma_rows(sigma, net.n, net.m)
    return net.gamma * (net.Jb @ (S * (net.lift(L) @ (net.Cb @ xf))))


def alg2_rhs(state: NetworkState, net: Network, g: Digraph, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Solve M dlam = gamma J S L C x by LU, then dx = -alpha grad f - K lam - (beta/gamma) J^{-1} dlam."""
    L = laplacian(g)
    M = loop_matrix(net, L, sigma, net.nus)
    b = _loop_rhs(net, L, sigma, state.x.ravel())
    lu = _factor(M)
    dlam = sla.lu_solve(lu, b)
    dx = (
        -net.alpha * net.gradients_flat(state.x.ravel())
        - net.Kb @ state.lam.ravel()
        - (net.beta / net.gamma) * (net.Jinvb @ dlam)
    )
    return dx.reshape(net.n, net.m), dlam.reshape(net.n, net.m)


def alg2_rhs_explicit(state: NetworkState, net: Network, g: Digraph, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Closed form with an explicit inverse of the loop matrix."""
    L = laplacian(g)
    n, m = net.n, net.m
    S = np.diag(_sigma_rows(sigma, n, m))
    Minv = np.linalg.inv(loop_matrix(net, L, sigma, net.nus))
    coupling = net.Jb @ S @ net.lift(L) @ net.Cb
    xf = state.x.ravel()
    dx = (
        -net.alpha * net.gradients_flat(xf)
        - net.Kb @ state.lam.ravel()
        - net.beta * net.Jinvb @ Minv @ coupling @ xf
    )
    dlam = net.gamma * Minv @ coupling @ xf
    return dx.reshape(n, m), dlam.reshape(n, m)


def alg2_input(state: NetworkState, net: Network, g: Digraph, sigma) -> np.ndarray:
    """u from the agent-level loop (I - S L nu) u = -S L C x."""
    n, m = net.n, net.m
    S = _sigma_rows(sigma, n, m)
    Lb = net.lift(laplacian(g))
    nu = np.repeat(net.nus, m)
    A = np.eye(n * m) - (S[:, None] * Lb) * nu[None, :]
    u = np.linalg.solve(A, -S * (Lb @ (net.Cb @ state.x.ravel())))
    return u.reshape(n, m)


def coupling_input(state: NetworkState, net: Network, g: Digraph, sigma, algorithm: str) -> np.ndarray:
    if algorithm == "alg1":
        return alg1_input(state, net, g, sigma)
    if algorithm == "alg2":
        return alg2_input(state, net, g, sigma)
    raise DynamicsError(f"unknown algorithm {algorithm!r}")


def rhs(state: NetworkState, net: Network, g: Digraph, sigma, algorithm: str):
    if algorithm == "alg1":
        return alg1_rhs(state, net, g, sigma)
    if algorithm == "alg2":
        return alg2_rhs(state, net, g, sigma)
    raise DynamicsError(f"unknown algorithm {algorithm!r}")


def _factor(M: np.ndarray):
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularLoopError(f"loop matrix is singular (condition number {cond:.3e})")
    return sla.lu_factor(M)


def check_nonsingular(g: Digraph, sigma: float, nus: Sequence[float], J_blocks: Sequence[np.ndarray]):
    """Return ``(ok, condition_number)`` for M = I - sigma J L nu J^{-1}.

    ``ok`` requires -1 to stay away from the spectrum of -sigma J L nu J^{-1}
    and the spectrum of -L nu to lie in the closed right half plane.
    """
    J_blocks = [np.atleast_2d(np.asarray(J, dtype=float)) for J in J_blocks]
    m = J_blocks[0].shape[0]
    n = g.n_nodes
    Lb = np.kron(laplacian(g), np.eye(m))
    nu = np.diag(np.repeat(np.asarray(nus, dtype=float), m))
    Jb = sla.block_diag(*J_blocks)
    Q = -sigma * Jb @ Lb @ nu @ np.linalg.inv(Jb)
    M = np.eye(n * m) + Q
    ev = np.linalg.eigvals(Q)
    away = bool(np.min(np.abs(ev + 1.0)) > 1e-12) if ev.size else True
    right_half = bool(np.min(np.linalg.eigvals(-Lb @ nu).real) >= -1e-9)
    cond = float(np.linalg.cond(M))
    return away and right_half and np.isfinite(cond), cond


# --- linear analysis -------------------------------------------------------

def linearized_system_matrix(fs: Sequence[ObjectiveFunction], g: Digraph, sigma: float) -> np.ndarray:
    """Error-system matrix [[-F - sigma L, -I], [sigma L, 0]] for quadratic objectives.

    Assumes alpha = beta = gamma = 1 and J = K = C = I.
    """
    if not all(f.is_quadratic for f in fs):
        raise DynamicsError("linearized_system_matrix needs quadratic objectives")
    m = fs[0].dim
    n = len(fs)
    F = sla.block_diag(*[f.quadratic[0] for f in fs])
    Lb = np.kron(laplacian(g), np.eye(m))
    I = np.eye(n * m)
    return np.block([[-F - sigma * Lb, -I], [sigma * Lb, np.zeros((n * m, n * m))]])


def spectral_abscissa(A: np.ndarray, conserved: np.ndarray | None = None) -> float:
    """Largest real part of the spectrum, optionally restricted to ``conserved^T v = 0``.

    ``conserved`` holds left null vectors (as rows) of ``A``; their
    orthogonal complement is invariant, and restricting to it removes the
    zero eigenvalues that only reflect conserved quantities.
    """
    if conserved is None:
        return float(np.max(np.linalg.eigvals(A).real))
    W = np.atleast_2d(conserved)
    if np.max(np.abs(W @ A)) > 1e-9 * max(1.0, np.max(np.abs(A))):
        raise DynamicsError("conserved rows are not left null vectors of A")
    Q = sla.null_space(W)
    return float(np.max(np.linalg.eigvals(Q.T @ A @ Q).real))


def multiplier_sum_rows(n: int, m: int) -> np.ndarray:
    """Rows picking sum_i lam_i (per coordinate) out of a stacked (x, lam) vector."""
    W = np.zeros((m, 2 * n * m))
    for k in range(m):
        W[k, n * m + k::m] = 1.0
    return W


def reduced_spectral_abscissa(fs: Sequence[ObjectiveFunction], g: Digraph, sigma: float) -> float:
    """Stability margin of the linearized error system on the zero-multiplier-sum subspace."""
    A = linearized_system_matrix(fs, g, sigma)
    return spectral_abscissa(A, multiplier_sum_rows(len(fs), fs[0].dim))


# --- compiled vector field for the integrator ------------------------------

class CompiledDynamics:
    """Flattened right-hand side with per-mode operator caching.

    Operators depending on the graph and a constant gain vector are built
    once per (mode, gains) pair.  Time-varying gains rebuild the loop
    solve on every call.
    """

    def __init__(self, net: Network, algorithm: str):
        if algorithm not in ALGORITHMS:
            raise DynamicsError(f"unknown algorithm {algorithm!r}")
        self.net = net
        self.algorithm = algorithm
        self.nm = net.n * net.m
        self._lc: dict[int, np.ndarray] = {}
        self._lin: dict[tuple, np.ndarray] = {}
        self._nu = np.repeat(net.nus, net.m) if algorithm == "alg2" else None

    def _lifted(self, key: int, g: Digraph) -> tuple[np.ndarray, np.ndarray]:
        if key not in self._lc:
            Lb = self.net.lift(laplacian(g))
            self._lc[key] = (Lb, Lb @ self.net.Cb)
        return self._lc[key]

    def input_operator(self, key: int, g: Digraph, sigma: np.ndarray, cache: bool) -> np.ndarray:
        """Matrix G with u = G x for the current mode and gains."""
        ck = (key, sigma.tobytes())
        if cache and ck in self._lin:
            return self._lin[ck]
        Lb, LC = self._lifted(key, g)
        S = np.repeat(sigma, self.net.m)
        G = -S[:, None] * LC
        if self.algorithm == "alg2":
            A = np.eye(self.nm) - (S[:, None] * Lb) * self._nu[None, :]
            try:
                G = np.linalg.solve(A, G)
            except np.linalg.LinAlgError:
                raise SingularLoopError(f"loop matrix singular in mode {key}") from None
        if cache:
            self._lin[ck] = G
        return G

    def __call__(self, y: np.ndarray, G: np.ndarray) -> np.ndarray:
        net = self.net
        nm = self.nm
        x = y[:nm]
        lam = y[nm:]
        u = G @ x
        out = np.empty_like(y)
        out[:nm] = -net.alpha * net.gradients_flat(x) - net.Kb @ lam + net.beta * u
        out[nm:] = -net.gamma * (net.Jb @ u)
        return out

    def affine(self, G: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        """``(A, b)`` with ``ydot = A y + b`` when every objective is quadratic, else ``None``."""
        net = self.net
        if net._Qb is None:
            return None
        nm = self.nm
        A = np.zeros((2 * nm, 2 * nm))
        A[:nm, :nm] = -net.alpha * net._Qb + net.beta * G
        A[:nm, nm:] = -net.Kb
        A[nm:, :nm] = -net.gamma * (net.Jb @ G)
        b = np.concatenate([net.alpha * (net._Qb @ net._cb), np.zeros(nm)])
        return A, b


def rk4_affine_map(A: np.ndarray, b: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """One classic RK4 step of ``ydot = A y + b`` written as ``y -> P y + q``."""
    n = A.shape[0]
    hA = h * A
    P = np.eye(n)
    S = np.eye(n)
    term = np.eye(n)
    for k in range(1, 5):
        term = term @ hA / k
        P = P + term
        if k < 4:
            S = S + term / (k + 1)
    return P, h * (S @ b)
