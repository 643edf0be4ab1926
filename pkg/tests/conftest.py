import numpy as np
import pytest

from ifpopt.dynamics import Network
from ifpopt.graph import Digraph, ring
from ifpopt.objective import make_example1, make_example2
from ifpopt.passivity import AgentParams, ifp_index_minimax

PUBLISHED_EX1_NUS = (-0.31, -0.49, -1.0, -0.68)


def pair_mode(pairs, n=4):
    a = np.zeros((n, n))
    for i, j in pairs:
        a[i, j] = a[j, i] = 1.0
    return Digraph(a)


# the three switching modes of the first example, as pairs of agents
EX1_MODES = (
    ((0, 1), (2, 3)),
    ((0, 3), (1, 2)),
    ((0, 2), (1, 3)),
)


def ex1_network(pinned=True):
    fs = [make_example1(i) for i in range(1, 5)]
    agents = []
    for i, f in enumerate(fs, 1):
        p = AgentParams(1.0, 1.0, 1.0, [[1.0 / i]], [[float(i)]], [[1.0]])
        nu, eta = ifp_index_minimax(p, f)
        agents.append(p.with_index(PUBLISHED_EX1_NUS[i - 1] if pinned else nu, eta))
    return Network(agents, fs)


def ex2_network():
    fs = [make_example2(i) for i in range(1, 5)]
    agents = []
    for f in fs:
        p = AgentParams(1.0, 1.0, 1.0, [[1.0]], [[1.0]], [[1.0]])
        nu, eta = ifp_index_minimax(p, f)
        agents.append(p.with_index(nu, eta))
    return Network(agents, fs)


@pytest.fixture
def ring4():
    return ring(4)


@pytest.fixture(scope="session")
def net1():
    return ex1_network()


@pytest.fixture(scope="session")
def net2():
    return ex2_network()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
