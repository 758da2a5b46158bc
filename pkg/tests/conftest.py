import numpy as np
import pytest

from vitastar.gridmap import OccupancyMap, PlanningProblem


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def grid(text):
    """Map from rows of '.' (free) and '#' (obstacle)."""
    rows = [r.strip() for r in text.strip().splitlines()]
    return OccupancyMap(np.array([[c == "#" for c in r] for r in rows], dtype=np.uint8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def corridor():
    occ = grid("""
        #######
        .......
        #######
    """)
    return PlanningProblem(occ, (1, 0), (1, 6))


# acceptance summary: test_acceptance appends (criterion, passed, detail) here
ACCEPTANCE: list[tuple[int, bool, str]] = []


def acceptance_line(criterion: int, passed: bool, detail: str) -> str:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE.append((criterion, passed, detail))
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
