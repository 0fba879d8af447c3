import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from robustfusion.scene import make_frame


@pytest.fixture(scope="session")
def frames():
    """Six small reproducible frames shared by read-only tests."""
    return [make_frame(11, f"fixture-{i:05d}") for i in range(6)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda l: int(l.split()[0][1:])):
            terminalreporter.write_line(line)
