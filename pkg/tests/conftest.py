import numpy as np
import pytest
from hypothesis import settings

from vitgan_lab import tensor as T

settings.register_profile("lab", max_examples=40, deadline=None)
settings.load_profile("lab")

# acceptance verdicts, printed once at the end of the session
VERDICTS: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}"
    VERDICTS.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield
