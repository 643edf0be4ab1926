"""IFP index estimation for the per-agent error subsystems and their storage function.

Each agent's error dynamics about the optimal point is input feedforward
passive with some index nu <= 0.  The storage function below certifies
``dV/dt <= y^T u - nu u^T u`` whenever ``eta > 1 / (mu alpha gamma)``, and
the index follows from minimizing over ``eta`` the worst-case ratio

    ||eta (alpha beta H - gamma C^T) - (beta / gamma) I||^2 / (4 (mu eta alpha - 1/gamma))

with ``H`` ranging over Hessian values of the local objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .objective import ObjectiveFunction


class PassivityError(ValueError):
    """Raised when an IFP index cannot be computed for the given parameters."""


@dataclass(frozen=True, eq=False)
class AgentParams:
    alpha: float
    beta: float
    gamma: float
    J: np.ndarray
    K: np.ndarray
    C: np.ndarray
    nu: float | None = None
    eta: float | None = None

    def __post_init__(self):
        for name in ("J", "K", "C"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        m = self.C.shape[0]
        if self.J.shape != (m, m) or self.K.shape != (m, m) or self.C.shape != (m, m):
            raise ValueError("J, K and C must all be m x m")
        for name in ("J", "K"):
            if not np.isfinite(np.linalg.cond(getattr(self, name))) or np.linalg.cond(getattr(self, name)) > 1e12:
                raise ValueError(f"{name} must be invertible")
        if np.linalg.norm(self.K @ self.J - self.C.T) > 1e-10:
            raise ValueError("K J must equal C^T")
        if self.nu is not None and self.nu > 0:
            raise ValueError("nu must be <= 0")

    @property
    def dim(self) -> int:
        return self.C.shape[0]

    def with_index(self, nu: float, eta: float | None = None) -> "AgentParams":
        return replace(self, nu=nu, eta=self.eta if eta is None else eta)

    def eta_lower_bound(self, mu: float) -> float:
        return 1.0 / (mu * self.alpha * self.gamma)

    def default_eta_search(self, mu: float) -> tuple[float, float]:
        lo = self.eta_lower_bound(mu)
        return lo * (1.0 + 1e-6), 1e3 * lo


@dataclass(frozen=True)
class StorageEvaluation:
    value: float
    z: np.ndarray


def _minimize_over_eta(
    phi: Callable[[float], float], eta_search: tuple[float, float], grid: int
) -> tuple[float, float]:
    """Grid scan (log spaced) followed by golden-section refinement of the best bracket."""
    lo, hi = eta_search
    etas = np.geomspace(lo, hi, grid)
    vals = np.array([phi(e) for e in etas])
    if not np.all(np.isfinite(vals)):
        raise PassivityError("non-finite objective on the eta grid")
    k = int(np.argmin(vals))
    if 0 < k < grid - 1:
        res = minimize_scalar(phi, bracket=(etas[k - 1], etas[k], etas[k + 1]), method="golden",
                              tol=1e-12)
        if res.fun <= vals[k] and lo <= res.x <= hi:
            return float(res.fun), float(res.x)
    return float(vals[k]), float(etas[k])


def _check_search(p: AgentParams, mu: float, eta_search):
    if eta_search is None:
        eta_search = p.default_eta_search(mu)
    lo, hi = eta_search
    if not (lo > p.eta_lower_bound(mu)) or not (hi > lo):
        raise PassivityError(
            f"empty feasible eta range: need {p.eta_lower_bound(mu):.6g} < lo < hi, got ({lo}, {hi})"
        )
    return float(lo), float(hi)


def ifp_index_minimax(
    p: AgentParams,
    f: ObjectiveFunction,
    eta_search: tuple[float, float] | None = None,
    grid: int = 1000,
) -> tuple[float, float]:
    """Return ``(nu, eta_star)`` from the minimax over eta and the Hessian range.

    For scalar objectives the numerator is the square of an affine function
    of the Hessian value, so its maximum over ``[mu, lip]`` sits at an
    endpoint.  Vector objectives use the relaxed bound instead.
    """
    if grid < 100:
        raise ValueError("grid must be >= 100")
    if f.dim > 1:
        return ifp_index_relaxed_with_eta(p, f.mu, f.lip, eta_search, grid)
    lo, hi = _check_search(p, f.mu, eta_search)
    a, b, g = p.alpha, p.beta, p.gamma
    c = float(p.C[0, 0])
    hs = (f.mu, f.lip)

    def phi(eta):
        num = max((eta * (a * b * h - g * c) - b / g) ** 2 for h in hs)
        return num / (4.0 * (f.mu * eta * a - 1.0 / g))

    val, eta_star = _minimize_over_eta(phi, (lo, hi), grid)
    if not math.isfinite(val):
        raise PassivityError("non-finite index")
    return -val, eta_star


def ifp_index_relaxed_with_eta(
    p: AgentParams, mu: float, lip: float, eta_search=None, grid: int = 1000
) -> tuple[float, float]:
    lo, hi = _check_search(p, mu, eta_search)
    a, b, g = p.alpha, p.beta, p.gamma
    cnorm = float(np.linalg.norm(p.C.T, 2))

    def phi(eta):
        return ((eta * a * lip + 1.0 / g) * abs(b) + eta * g * cnorm) ** 2 / (4.0 * (mu * eta * a - 1.0 / g))

    val, eta_star = _minimize_over_eta(phi, (lo, hi), grid)
    if not math.isfinite(val):
        raise PassivityError("non-finite index")
    return -val, eta_star


def ifp_index_relaxed(
    p: AgentParams, mu: float, lip: float, eta_search: tuple[float, float] | None = None, grid: int = 1000
) -> float:
    """Conservative index from norm bounds; never larger than the minimax index."""
    return ifp_index_relaxed_with_eta(p, mu, lip, eta_search, grid)[0]


def ifp_index_bruteforce(
    p: AgentParams,
    f: ObjectiveFunction,
    xs: np.ndarray,
    etas: np.ndarray,
) -> tuple[float, float]:
    """Dense-grid minimax evaluating the true Hessian at sample points ``xs``.

    Independent of the endpoint reduction used by :func:`ifp_index_minimax`;
    suited to scalar objectives.
    """
    a, b, g = p.alpha, p.beta, p.gamma
    m = p.dim
    hess = [np.atleast_2d(f.hessian(np.atleast_1d(x))) for x in xs]
    lb = p.eta_lower_bound(f.mu)
    if m == 1:
        h = np.array([float(hh[0, 0]) for hh in hess])
        e = np.asarray(etas, dtype=float)
        e = e[e > lb]
        if e.size == 0:
            return -math.inf, math.nan
        num = (e[:, None] * (a * b * h[None, :] - g * float(p.C[0, 0])) - b / g) ** 2
        vals = num.max(axis=1) / (4.0 * (f.mu * e * a - 1.0 / g))
        k = int(np.argmin(vals))
        return -float(vals[k]), float(e[k])
    best, best_eta = math.inf, math.nan
    for eta in etas:
        if eta <= lb:
            continue
        worst = max(
            np.linalg.norm(eta * (a * b * h - g * p.C.T) - (b / g) * np.eye(m), 2) ** 2 for h in hess
        )
        val = worst / (4.0 * (f.mu * eta * a - 1.0 / g))
        if val < best:
            best, best_eta = val, float(eta)
    return -best, best_eta


def storage_parameter(p: AgentParams, f: ObjectiveFunction, eta: float) -> float:
    """Clamp ``eta`` strictly above its positivity bound."""
    return max(eta, p.eta_lower_bound(f.mu) * (1.0 + 1e-6))


def storage_value(
    p: AgentParams,
    f: ObjectiveFunction,
    x: np.ndarray,
    lam: np.ndarray,
    x_star: np.ndarray,
    lam_star: np.ndarray,
) -> StorageEvaluation:
    """Per-agent storage V_i about the optimal point ``(x_star, lam_star)``."""
    if p.eta is None:
        raise ValueError("AgentParams.eta must be set to evaluate the storage function")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    dx = x - x_star
    dlam = lam - lam_star
    g_star = f.gradient(x_star)
    k_dlam = p.K @ dlam
    z = p.alpha * (f.gradient(x) - g_star) + k_dlam
    v = (
        0.5 * p.eta * float(z @ z)
        - float(dx @ k_dlam) / p.gamma
        + (p.alpha / p.gamma) * (f.value(x_star) - f.value(x) + float(g_star @ dx))
    )
    return StorageEvaluation(v, z)
