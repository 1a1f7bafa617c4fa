import numpy as np
import pytest

from ccmix.model import BlockPartition, CcmModel, clamp_simplex, random_block_params


def random_partition(rng, g, m):
    d = len(m)
    comps = []
    for _ in range(g):
        labels = rng.integers(0, d, size=d)
        comps.append([np.flatnonzero(labels == c).tolist() for c in np.unique(labels)])
    return BlockPartition.from_lists(comps, m)


def random_model(rng, g, m, partition=None):
    m = tuple(int(v) for v in m)
    partition = partition or random_partition(rng, g, m)
    blocks = tuple(
        tuple(random_block_params(tuple(m[j] for j in b), rng) for b in comp)
        for comp in partition.components
    )
    pi = clamp_simplex(rng.dirichlet(np.ones(g)))
    return CcmModel(g, partition, pi, blocks, m)


def random_structure(rng, d_max=4, m_max=4, g_max=3):
    d = int(rng.integers(1, d_max + 1))
    m = tuple(int(v) for v in rng.integers(2, m_max + 1, size=d))
    g = int(rng.integers(1, g_max + 1))
    return g, m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA = {}


def record(number: int, passed: bool, detail: str) -> None:
    """Keep one verdict line per acceptance criterion for the final summary."""
    CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
