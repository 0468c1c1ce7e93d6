import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from navfuse.gridworld import OccupancyGrid, generate_map

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def open_grid(width=10, height=10, goals=None) -> OccupancyGrid:
    occ = np.zeros((height, width), dtype=bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    return OccupancyGrid(occ, goals or {"chair": [(width - 2, height - 2)]})


def grid_from_rows(rows, goals=None) -> OccupancyGrid:
    """Rows are given top line = highest y, as they read on screen."""
    occ = np.array([[ch == "#" for ch in r] for r in reversed(rows)], dtype=bool)
    return OccupancyGrid(occ, goals or {})


@pytest.fixture(scope="session")
def small_maps():
    return [(f"m{i}", generate_map(24, 24, 0.15, None, 40 + i)) for i in range(3)]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
