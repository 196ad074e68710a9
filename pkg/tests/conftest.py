import numpy as np
import pytest

from dualmpc import oracle
from dualmpc.harness.generators import fixture_mpc1, fixture_p1, gen_random_qp

# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def p1():
    return fixture_p1()


@pytest.fixture(scope="session")
def p1_reference():
    return oracle.reference_solve(fixture_p1())


@pytest.fixture
def mpc1():
    return fixture_mpc1()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_qps():
    """Ten seeded random QPs (n in {10, 30}) with oracle solutions."""
    out = []
    for n in (10, 30):
        for seed in range(5):
            qp = gen_random_qp(n, seed)
            out.append((f"n{n}-s{seed}", qp, oracle.reference_solve(qp)))
    return out


@pytest.fixture
def acceptance():
    """Record one criterion: stores (ok, detail) and prints the pass/fail line."""

    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
