import numpy as np
import pytest

from mrdose.sim import DgpSpec, simulate_dataset

# (criterion id, label, passed, detail) appended by test_acceptance
ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def dgp():
    return DgpSpec()


@pytest.fixture(scope="session")
def sim10k(dgp):
    return simulate_dataset(dgp.with_n(10_000), 12345)


@pytest.fixture(scope="session")
def sim50k(dgp):
    return simulate_dataset(dgp.with_n(50_000), 777)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, label, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  [{cid:>2}] {label}: {detail}")
