import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tube_attention.attention import AttentionParams  # noqa: E402
from tube_attention.geometry import TubeIndex  # noqa: E402

ACCEPTANCE_RESULTS = []


def random_tube(rng, dims, p=None):
    p = rng.uniform(0.1, 0.9) if p is None else p
    return TubeIndex(rng.uniform(size=dims) < p)


def random_params(rng, c, cr, scale=0.5):
    return AttentionParams(*(rng.normal(scale=scale, size=s) for s in [(c, cr)] * 3 + [(cr, c)]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
