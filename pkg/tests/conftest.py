import time

import pytest

from robustsmp.fbsde import picard_solve
from robustsmp.scenarios import gibbs_linear, portfolio

VERDICTS: list[str] = []


def record_verdict(number: int, title: str, ok: bool, detail: str) -> None:
    VERDICTS.append(f"{'PASS' if ok else 'FAIL'} [{number:>2}] {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def gibbs_full():
    """Gibbs scenario at acceptance scale, with the wall time of the solve."""
    start = time.perf_counter()
    sol = picard_solve(gibbs_linear(0.5, 1.0), 100_000, 100, 7)
    return sol, time.perf_counter() - start


@pytest.fixture(scope="session")
def portfolio_full():
    start = time.perf_counter()
    sol = picard_solve(portfolio(c=0.1, sigma=0.2, lam=1.0), 50_000, 100, 3)
    return sol, time.perf_counter() - start


@pytest.fixture(scope="session")
def gibbs_small():
    return picard_solve(gibbs_linear(0.5, 1.0), 10_000, 50, 11)


@pytest.fixture(scope="session")
def portfolio_small():
    return picard_solve(portfolio(), 10_000, 50, 11)
