import numpy as np
import pytest
from hypothesis import settings

# invariant suites run at >= 1000 examples; keep deadlines off for numpy warm-up
settings.register_profile("default", deadline=None, derandomize=True)
settings.load_profile("default")

PROPERTY = settings(max_examples=1000, deadline=None, derandomize=True)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance lines, echoed at the end of the run even when output is captured
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
