import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ftimmune.graph import GraphData

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_graph(n: int, p: float, seed: int = 0, d: int = 4, c: int = 2, train: float = 0.5) -> GraphData:
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    edges = set(zip(iu[keep].tolist(), ju[keep].tolist()))
    y = rng.integers(0, c, size=n)
    y[:c] = np.arange(c)               # every class present
    labels = np.eye(c)[y]
    feats = rng.standard_normal((n, d))
    tr = np.zeros(n, dtype=bool)
    tr[rng.permutation(n)[:max(1, int(train * n))]] = True
    te = ~tr
    return GraphData(n, edges, feats, labels, tr, np.zeros(n, dtype=bool), te)


@pytest.fixture
def graph_factory():
    return random_graph



FIXTURE_SEEDS = (0, 1, 2, 3, 4)
ACCEPTANCE_LINES: list = []


@functools.cache
def standard_fixtures() -> tuple:
    """The five seeded N = 500 poisoned fixtures with undefended clean/poisoned test accuracy."""
    from ftimmune.fixture import build_fixture
    from ftimmune.models import evaluate, train

    out = []
    for s in FIXTURE_SEEDS:
        fx = build_fixture(s)
        clean = evaluate(fx.clean, train(fx.clean, fx.arch, fx.train_cfg), fx.arch)["test_acc"]
        poisoned = evaluate(fx.poisoned, train(fx.poisoned, fx.arch, fx.train_cfg), fx.arch)["test_acc"]
        out.append({"fixture": fx, "clean_acc": clean, "poisoned_acc": poisoned})
    return tuple(out)


@pytest.fixture(scope="session")
def sbm_fixtures():
    return standard_fixtures()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
