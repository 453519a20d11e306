import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sea.graph import Graph

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def er_graph(rng, n, p, **kw):
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < p
    return Graph.from_edges(n, np.stack([iu[keep], ju[keep]], axis=1), **kw)


def reachable_within(adj: np.ndarray, k: int) -> np.ndarray:
    """Boolean (I + A)^k reachability, the independent oracle for hop sets."""
    n = len(adj)
    step = (np.eye(n) + adj) > 0
    reach = np.eye(n, dtype=bool)
    for _ in range(k):
        reach = (reach.astype(np.int64) @ step.astype(np.int64)) > 0
    return reach


def hop_distance(adj: np.ndarray, max_k: int) -> np.ndarray:
    """Exact distances up to max_k from reachability differences; -1 beyond."""
    n = len(adj)
    dist = np.full((n, n), -1)
    prev = np.zeros((n, n), dtype=bool)
    for k in range(max_k + 1):
        cur = reachable_within(adj, k)
        dist[cur & ~prev] = k
        prev = cur
    return dist


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
