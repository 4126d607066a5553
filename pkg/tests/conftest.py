import math

import numpy as np
import pytest

from consode.config import load_system

A = -1.0
B = 0.3849
X0 = 0.571


@pytest.fixture(scope="session")
def elliptic():
    return load_system("elliptic.sys")


@pytest.fixture(scope="session")
def elliptic_x0():
    return np.array([X0, math.sqrt(X0 ** 3 + A * X0 + B)])


ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one ``criterion N: PASS|FAIL ...`` line, shown in the terminal summary."""
    def _record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
