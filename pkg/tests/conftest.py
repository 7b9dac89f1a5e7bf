import numpy as np
import pytest

from mepi.models import Dataset, MeanFamily, MeanModel, ModelSpec
from mepi.simulation import SimScenario, generate, scenario_priors

BETA_TRUE = np.array([4.0, 1.0, 1.0, 1.0, 0.5])


@pytest.fixture
def spec():
    return ModelSpec(MeanModel(MeanFamily.POLY2), 0.1, 0.3)


@pytest.fixture(scope="session")
def sim1_small():
    """A small Simulation-1 dataset with its grouped working priors."""
    sc = SimScenario.simulation("1", model=1, n=120, seed=3)
    data, x = generate(sc, 0)
    return sc, data, x, scenario_priors(sc, data)


def make_dataset(rng, n, beta=BETA_TRUE, spec=None, sigma_u=0.3, sigma_eps=0.1, x=None):
    """Simulation-1 style data drawn outside the package generator."""
    spec = spec or ModelSpec(MeanModel(MeanFamily.POLY2), sigma_eps, sigma_u)
    if x is None:
        x = 2 * np.sqrt(3) * rng.beta(2, 2, n) - np.sqrt(3)
    z = np.column_stack([np.ones(n), rng.uniform(size=n), rng.binomial(1, 0.8, n)])
    w = x + sigma_u * rng.standard_normal(n)
    y = spec.mean(x, z, beta) + sigma_eps * rng.standard_normal(n)
    return Dataset(w, z, y), x


_ACCEPTANCE_LINES = []


@pytest.fixture
def report(capsys):
    """``report(k, ok, detail)`` prints one PASS/FAIL line and asserts ``ok``."""
    def _report(k, ok, detail):
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'} ({detail})"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
