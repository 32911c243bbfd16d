import numpy as np
import pytest

from drlearn.feeder import FeederModel, GeneratorParams, Line, Node
from drlearn.learning_loop import DEFAULT_FEEDER

ACCEPTANCE_LINES: list[str] = []


def random_feeder(rng, m, n_gen=2, base_mva=10.0, s_max=np.inf, u_band=(0.81, 1.21)):
    """Random radial feeder: node k attaches to a uniformly chosen earlier node."""
    parent = [0] + [int(rng.integers(0, k)) for k in range(1, m)]
    gen_nodes = set(rng.choice(np.arange(1, m), size=min(n_gen, m - 1), replace=False).tolist()) \
        if m > 1 else set()
    nodes = []
    for i in range(m):
        dp = 0.0 if i == 0 else float(rng.uniform(0.1, 1.0))
        gamma = 0.0 if i == 0 else float(rng.uniform(0.0, 0.5))
        gen = None
        if i in gen_nodes:
            gen = GeneratorParams(float(rng.uniform(0, 2)), float(rng.uniform(5, 20)), 0.0,
                                  0.0, 1.0, -0.5, 0.5)
        nodes.append(Node(i, dp, gamma * dp, gamma, u_band[0], u_band[1], gen))
    lines = [Line(parent[i], i, float(rng.uniform(0.01, 0.1)), float(rng.uniform(0.01, 0.1)),
                  s_max) for i in range(1, m)]
    return FeederModel(tuple(nodes), tuple(lines), base_mva=base_mva)


def chain(m, R=0.1, X=0.1, gamma=0.5, dP=1.0, base_mva=1.0, **node_kw):
    nodes = [Node(0, 0.0, 0.0)] + [Node(i, dP, gamma * dP, gamma, **node_kw) for i in range(1, m)]
    lines = [Line(i - 1, i, R, X, np.inf) for i in range(1, m)]
    return FeederModel(tuple(nodes), tuple(lines), base_mva=base_mva)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def feeder15_dir():
    return DEFAULT_FEEDER


@pytest.fixture(scope="session")
def acceptance():
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
