import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from homogamy.tables import ContingencyTable, RaceEduLayout

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.addinivalue_line("markers", "slow: long-running check")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    outcome = "PASS" if call.excinfo is None else "FAIL"
    prev = _CRITERIA.get(number)
    if prev is None or prev[1] == "PASS":
        _CRITERIA[number] = (title, outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcome = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {outcome}  {title}")


def small_layout() -> RaceEduLayout:
    return RaceEduLayout(("B", "W"), ("L", "H"))


def random_race_edu(rng, layout=None, extra=(4, 15)) -> ContingencyTable:
    """Positive 4x4 (two races x two levels) table, total at most 16 + extra[1] - 1."""
    layout = layout or small_layout()
    n, m = layout.shape
    k = int(rng.integers(*extra))
    counts = 1 + rng.multinomial(k, np.ones(n * m) / (n * m)).reshape(n, m)
    return ContingencyTable(counts.astype(float), layout.row_labels(), layout.col_labels())


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)
