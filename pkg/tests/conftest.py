import time

import pytest
from hypothesis import settings

# first calls pay numba compilation, so wall-clock deadlines are meaningless here
settings.register_profile("default", deadline=None)
settings.load_profile("default")

_LINES = []


class CriterionReporter:
    """Records one pass/fail line per acceptance criterion."""

    def __init__(self, name):
        self.name = name
        self.t0 = time.perf_counter()

    def check(self, ok: bool, detail: str, budget_s: float | None = None):
        elapsed = time.perf_counter() - self.t0
        within = budget_s is None or elapsed <= budget_s
        status = "PASS" if ok and within else "FAIL"
        budget = f" (budget {budget_s:.0f}s)" if budget_s is not None else ""
        line = f"{status} {self.name}: {detail}; runtime {elapsed:.1f}s{budget}"
        _LINES.append(line)
        print(line)
        assert ok, line
        assert within, f"{self.name} exceeded its runtime budget: {elapsed:.1f}s > {budget_s}s"


@pytest.fixture
def criterion(request):
    return lambda name: CriterionReporter(name)


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
