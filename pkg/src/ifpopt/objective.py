"""Local objective functions with exact derivatives and convexity constants."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class ObjectiveFunction:
    """A C^2 strongly convex function on R^m.

    ``mu`` and ``lip`` bound the Hessian spectrum everywhere.  When the
    function is quadratic, ``quadratic`` holds ``(Q, c)`` with
    ``gradient(x) = Q (x - c)``.
    """

    name: str
    dim: int
    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    mu: float
    lip: float
    quadratic: tuple[np.ndarray, np.ndarray] | None = None
    scalar_gradient: Callable[[float], float] | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if not (self.mu > 0):
            raise ValueError(f"{self.name}: mu must be positive")
        if self.lip < self.mu:
            raise ValueError(f"{self.name}: lip must be >= mu")

    @property
    def is_quadratic(self) -> bool:
        return self.quadratic is not None

    def __repr__(self):
        return f"ObjectiveFunction({self.name!r}, dim={self.dim}, mu={self.mu}, lip={self.lip})"


def quadratic(Q, c, offset: float = 0.0, name: str | None = None) -> ObjectiveFunction:
    """f(x) = 1/2 (x - c)^T Q (x - c) + offset, Q symmetric positive definite."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    m = c.shape[0]
    if Q.shape != (m, m):
        raise ValueError(f"Q must be {m}x{m}, got {Q.shape}")
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise ValueError("Q must be symmetric")
    ev = np.linalg.eigvalsh(Q)
    if ev[0] <= 0:
        raise ValueError("Q must be positive definite")
    Q.setflags(write=False)
    c.setflags(write=False)

    def value(x):
        d = np.asarray(x, dtype=float) - c
        return 0.5 * float(d @ Q @ d) + offset

    def gradient(x):
        return Q @ (np.asarray(x, dtype=float) - c)

    def hessian(x):
        return Q.copy()

    return ObjectiveFunction(
        name or "quadratic", m, value, gradient, hessian, float(ev[0]), float(ev[-1]), (Q, c)
    )


def scaled_quadratic(scale: float, center, name: str | None = None) -> ObjectiveFunction:
    """f(x) = scale * ||x - center||^2."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    m = center.shape[0]
    return quadratic(2.0 * scale * np.eye(m), center, name=name or f"{scale}*||x-c||^2")


def _scalar(name, value, grad, hess, mu, lip, quad=None) -> ObjectiveFunction:
    return ObjectiveFunction(
        name,
        1,
        lambda x: float(value(float(np.asarray(x).reshape(-1)[0]))),
        lambda x: np.array([grad(float(np.asarray(x).reshape(-1)[0]))]),
        lambda x: np.array([[hess(float(np.asarray(x).reshape(-1)[0]))]]),
        mu,
        lip,
        quad,
        grad,
    )


def _logsumexp2(x):
    # ln(e^{-0.3x} + e^{0.5x}) without overflow
    a, b = -0.3 * x, 0.5 * x
    hi = max(a, b)
    return hi + math.log(math.exp(a - hi) + math.exp(b - hi))


def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def make_example1(i: int) -> ObjectiveFunction:
    """The four scalar objectives of the first numerical example (i = 1..4)."""
    if i == 1:
        q = (np.array([[0.8]]), np.array([1.25]))
        return _scalar("0.4x^2 - x", lambda x: 0.4 * x * x - x, lambda x: 0.8 * x - 1.0,
                       lambda x: 0.8, 0.8, 0.8, q)
    if i == 2:
        # d/dx ln(e^{-0.3x} + e^{0.5x}) = -0.3 + 0.8 s with s = sigmoid(0.8x)
        return _scalar(
            "ln(e^-0.3x + e^0.5x) + 0.6x^2",
            lambda x: _logsumexp2(x) + 0.6 * x * x,
            lambda x: -0.3 + 0.8 * _sigmoid(0.8 * x) + 1.2 * x,
            lambda x: 0.64 * _sigmoid(0.8 * x) * (1.0 - _sigmoid(0.8 * x)) + 1.2,
            1.20,
            1.36,
        )
    if i == 3:
        return _scalar("x^2 + cos x", lambda x: x * x + math.cos(x), lambda x: 2.0 * x - math.sin(x),
                       lambda x: 2.0 - math.cos(x), 1.0, 3.0)
    if i == 4:
        return _scalar(
            "x^2/sqrt(x^2+1) + 0.9x^2",
            lambda x: x * x / math.sqrt(x * x + 1.0) + 0.9 * x * x,
            lambda x: (x ** 3 + 2.0 * x) / (x * x + 1.0) ** 1.5 + 1.8 * x,
            lambda x: (2.0 - x * x) / (x * x + 1.0) ** 2.5 + 1.8,
            1.76,
            3.8,
        )
    raise ValueError(f"example-1 objective index must be in 1..4, got {i}")


def make_example2(i: int) -> ObjectiveFunction:
    """0.025 (i+1) (x - i)^2 for i = 1..4."""
    if i not in (1, 2, 3, 4):
        raise ValueError(f"example-2 objective index must be in 1..4, got {i}")
    return scaled_quadratic(0.025 * (i + 1), [float(i)], name=f"0.025*{i + 1}*(x-{i})^2")


CATALOG: dict[str, Callable[..., ObjectiveFunction]] = {
    "example1": make_example1,
    "example2": make_example2,
    "quadratic": quadratic,
    "scaled_quadratic": scaled_quadratic,
}


def estimate_convexity_constants(
    f: ObjectiveFunction, box: Sequence[tuple[float, float]], samples: int
) -> tuple[float, float]:
    """Min and max Hessian eigenvalue over a regular grid with about ``samples`` points."""
    if samples < 2:
        raise ValueError("samples must be >= 2")
    if len(box) != f.dim:
        raise ValueError("box dimension does not match the function")
    per_axis = max(2, int(round(samples ** (1.0 / f.dim))))
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in box]
    lo_ev, hi_ev = math.inf, -math.inf
    for point in itertools.product(*axes):
        ev = np.linalg.eigvalsh(np.atleast_2d(f.hessian(np.array(point))))
        lo_ev = min(lo_ev, ev[0])
        hi_ev = max(hi_ev, ev[-1])
    return float(lo_ev), float(hi_ev)
