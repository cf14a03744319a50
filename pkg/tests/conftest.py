import numpy as np
import pytest

from gridem.grid import GridSpec, StateParams
from gridem.io import bundled_scenario
from gridem.powerflow import LoadProfile, generate_scenario


@pytest.fixture(scope="session")
def scenario():
    return bundled_scenario()


@pytest.fixture(scope="session")
def grid8(scenario):
    return scenario.grid


def radial_state(spec: GridSpec, rng, g_range=(5.0, 20.0), ratio=(1.5, 3.0)) -> StateParams:
    """Random spanning tree over the candidate set with positive g and negative b."""
    n = spec.n_bus
    order = rng.permutation(n)
    lines = []
    for pos in range(1, n):
        a = int(order[pos]) + 1
        c = int(order[rng.integers(pos)]) + 1
        g = rng.uniform(*g_range)
        lines.append((a, c, g, -g * rng.uniform(*ratio)))
    return StateParams.from_lines(spec, lines)


def random_instance(n_bus, seed, n_states=2, T=60, load=(0.05, 0.2)):
    """Complete candidate graph, random radial states, noise-free measurements."""
    rng = np.random.default_rng(seed)
    spec = GridSpec.complete(n_bus)
    states = [radial_state(spec, rng) for _ in range(n_states)]
    base_p = np.r_[0.0, rng.uniform(*load, n_bus - 1)]
    loads = LoadProfile(base_p, 0.4 * base_p, 0.5)
    labels = np.arange(T) % n_states
    ms = generate_scenario(spec, states, labels, loads, seed)
    return spec, states, ms


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report one line each at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
