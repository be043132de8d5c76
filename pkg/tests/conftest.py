import numpy as np
import pytest

from gopa.graph import NetworkGraph, assign_roles, generate_k_out


def star(h: int) -> NetworkGraph:
    """Centre 0 joined to leaves 1..h."""
    return NetworkGraph.from_edges(h + 1, [(0, i) for i in range(1, h + 1)])


def path(n: int) -> NetworkGraph:
    return NetworkGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def complete(n: int) -> NetworkGraph:
    return NetworkGraph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def random_connected(rng: np.random.Generator, n: int, extra: float = 0.3) -> NetworkGraph:
    """Random spanning tree plus Bernoulli extra edges."""
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < extra:
                edges.append((i, j))
    return NetworkGraph.from_edges(n, edges)


@pytest.fixture
def small_k_out():
    return assign_roles(generate_k_out(30, 3, 1), 0.2, 2)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
