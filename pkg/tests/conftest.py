import numpy as np
import pytest

from hiergeo.geo import BuildingRecord, CampusRegistry


def planar_registry(coords, splits=None, start_id=0):
    splits = splits or ["train"] * len(coords)
    return CampusRegistry(tuple(
        BuildingRecord(start_id + i, tuple(c), "planar", f"b{i}", s)
        for i, (c, s) in enumerate(zip(coords, splits))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
