import numpy as np
import pytest

from nvsd.physics import FieldConfig, SequenceConfig, coherence_product


@pytest.fixture(scope="session")
def field():
    return FieldConfig()


@pytest.fixture(scope="session")
def tau():
    return SequenceConfig().grid()


@pytest.fixture(scope="session")
def default_bath(field, tau):
    """Coherence of the default 50000-spin bath (seed 0) on the default grid."""
    from nvsd.lattice import ScenarioConfig, make_scenario

    sc = make_scenario(ScenarioConfig(n_target_spins=0, rng_seed=0))
    return coherence_product(sc.bath_A, sc.bath_B, field, 32, tau)


def synth(spins, field, tau, N=32, bath=None):
    """Noiseless p_x for a list of SpinParams, optionally times a bath factor."""
    M = coherence_product([s.A for s in spins], [s.B for s in spins], field, N, tau)
    if bath is not None:
        M = M * bath
    return 0.5 * (1.0 + M)


def region_spins(n, seed):
    """Random (A, B) inside the confidence region, both signs of A."""
    from nvsd.physics import SpinParams

    rng = np.random.default_rng(seed)
    A = rng.uniform(5e3, 70e3, n) * rng.choice([-1.0, 1.0], n)
    B = rng.uniform(15e3, 80e3, n)
    return [SpinParams(float(a), float(b)) for a, b in zip(A, B)]


# One PASS/FAIL line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def record_criterion(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
