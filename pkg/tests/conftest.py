import numpy as np
import pytest

from osdn.diagnostics import random_gates, random_stream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_case(seed, B=2, T=24, H=2, K=6, V=5, unit_keys=True):
    rng = np.random.default_rng(seed)
    stream = random_stream(rng, B, T, H, K, V, unit_keys=unit_keys)
    gates = random_gates(rng, B, T, H, K, alpha_range=(0.8, 1.0))
    return stream, gates


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
