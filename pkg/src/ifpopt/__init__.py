"""Distributed optimization over switching digraphs with passivity-based gain design."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .dynamics import Network, NetworkState, OptimalPoint, centralized_optimum, optimal_point
from .gains import GainProfile, GainSchedule, sigma_threshold_degree, sigma_threshold_eigen, threshold_report
from .graph import Digraph, SwitchingSchedule, laplacian, ring
from .objective import ObjectiveFunction, make_example1, make_example2, quadratic, scaled_quadratic
from .passivity import AgentParams, ifp_index_minimax, ifp_index_relaxed, storage_value
from .sim import Problem, SimConfig, Trajectory, integrate, monitor_lyapunov

__all__ = [
    "AgentParams", "Digraph", "GainProfile", "GainSchedule", "Network", "NetworkState", "ObjectiveFunction",
    "OptimalPoint", "Problem", "SimConfig", "SwitchingSchedule", "Trajectory", "centralized_optimum",
    "ifp_index_minimax", "ifp_index_relaxed", "integrate", "laplacian", "make_example1", "make_example2",
    "monitor_lyapunov", "optimal_point", "quadratic", "ring", "scaled_quadratic", "sigma_threshold_degree",
    "sigma_threshold_eigen", "storage_value", "threshold_report",
]
