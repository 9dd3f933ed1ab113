import numpy as np
import pytest

from stforecast.attention import MultiHeadConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_heads():
    return MultiHeadConfig(heads=2, head_dim=3)


def calendar(batch, steps, steps_per_day, rng):
    """Consecutive (dow, tod) codes starting at random slots."""
    start = rng.integers(0, 7 * steps_per_day, size=batch)
    t = start[:, None] + np.arange(steps)
    return (t // steps_per_day) % 7, t % steps_per_day


# one summary line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
