import numpy as np
import pytest

from betagnn.graph import SparseGraph


def random_graph(rng: np.random.Generator, n: int, p: float) -> SparseGraph:
    iu, iv = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < p
    return SparseGraph.from_edges(n, np.stack([iu[keep], iv[keep]], axis=1))


@pytest.fixture
def triangle():
    return SparseGraph.from_edges(3, [(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        status, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
