import os
import re

import pytest
from hypothesis import HealthCheck, settings

from kcm import _backend

settings.register_profile(
    "kcm", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "kcm"))


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test once per kernel implementation."""
    old = _backend.BACKEND
    _backend.set_backend(request.param)
    yield request.param
    _backend.set_backend(old)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Collect a one-line verdict per criterion; printed in the terminal summary."""

    def emit(line: str) -> None:
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return emit


def _criterion_number(line: str) -> int:
    m = re.search(r"criterion (\d+)", line)
    return int(m.group(1)) if m else 0


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=_criterion_number):
            terminalreporter.write_line(line)
