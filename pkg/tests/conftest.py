import numpy as np
import pytest

from arenarank.core import BattleLog, ModelRegistry, pair_arrays


def make_log(first, second, outcome, prob=None, models=None, voters=()):
    first = np.asarray(first)
    n_models = int(max(np.max(second), np.max(first)) + 1) if models is None else len(models)
    registry = ModelRegistry(models or [f"m{k}" for k in range(n_models)])
    prob = np.full(len(first), 1.0 / registry.n_pairs) if prob is None else prob
    return BattleLog(registry, first, second, outcome, prob, np.arange(len(first)), voters)


def bt_log(xi, T, seed=0):
    """Uniform-pair battles with Bernoulli logistic outcomes."""
    rng = np.random.default_rng(seed)
    xi = np.asarray(xi, dtype=float)
    first, second = pair_arrays(len(xi))
    k = rng.integers(0, len(first), T)
    p = 1.0 / (1.0 + np.exp(xi[first[k]] - xi[second[k]]))
    h = (rng.random(T) < p).astype(float)
    return make_log(first[k], second[k], h, np.full(T, 1.0 / len(first)), [f"m{i}" for i in range(len(xi))])


@pytest.fixture
def two_model_log():
    return make_log([0, 0, 0, 0], [1, 1, 1, 1], [1.0, 1.0, 1.0, 0.0], [1.0] * 4, ["a", "b"])


ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
