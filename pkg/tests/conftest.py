import numpy as np
import pytest

from twoscale import CovariatePath, SubjectCohort, SubjectRecord, TwoScaleGrid, build_grid
from twoscale.simulation import DEFAULT_SCENARIO, simulate_cohort

ONE = CovariatePath.constant([1.0])


def at_risk_cohort(rows, t_max, a0, a_max, d=1):
    """Cohort with the shared at-risk design from ``(entry, exit, event)`` rows."""
    subjects = tuple(SubjectRecord(str(i + 1), a, t, e, ONE, ONE) for i, (a, t, e) in enumerate(rows))
    return SubjectCohort(subjects, d=d, t_max=t_max, a0=a0, a_max=a_max, x_names=("Y",),
                         z_names=("Y",))


@pytest.fixture(scope="session")
def toy_cohort():
    # Aligned toy: integer entry ages on unit-spaced grids, so duration and age
    # cells coincide after shifting by the entry age.
    return at_risk_cohort([(0.0, 9.0, False), (1.0, 6.5, True), (2.0, 7.0, True)], 9.0, 0.0, 9.0)


@pytest.fixture(scope="session")
def toy_grid():
    return TwoScaleGrid(np.arange(10.0), np.arange(10.0))


@pytest.fixture(scope="session")
def sim_grid():
    return DEFAULT_SCENARIO.grid()


@pytest.fixture(scope="session")
def sim100():
    return simulate_cohort(100, DEFAULT_SCENARIO, 2024)


@pytest.fixture(scope="session")
def sim400():
    return simulate_cohort(400, DEFAULT_SCENARIO, 77)


@pytest.fixture(scope="session")
def small_grid():
    return build_grid(5.0, 0.0, 35.0, 30, 40)


# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(key: str, ok: bool, detail: str) -> None:
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.split(".")[0]), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
