import pytest

from bessgame.equilibrium import FeedbackPolicy
from bessgame.model import TimeGrid
from bessgame.riccati_homogeneous import solve_homogeneous
from bessgame.scenarios import baseline_market

COARSE_STEPS = 6000  # 0.004 h Riccati step for the quick unit tests


@pytest.fixture(scope="session")
def baseline8():
    return baseline_market(8)


@pytest.fixture(scope="session")
def coarse_grid():
    return TimeGrid(24.0, COARSE_STEPS)


@pytest.fixture(scope="session")
def baseline8_solution(baseline8):
    return solve_homogeneous(baseline8)


@pytest.fixture(scope="session")
def baseline8_policy(baseline8_solution):
    return FeedbackPolicy.from_homogeneous(baseline8_solution)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    def record(k: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {k:2d}: {detail}"
        ACCEPTANCE_LINES[k] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
