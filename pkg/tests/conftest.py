import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def read_golden_mask(name: str) -> np.ndarray:
    text = (GOLDEN / name).read_text().strip().splitlines()
    return np.array([[1 if ch == "#" else 0 for ch in row] for row in text])


def pytest_addoption(parser):
    parser.addoption(
        "--skip-slow", action="store_true", default=False,
        help="skip the long training-based tests",
    )


def pytest_collection_modifyitems(config, items):
    if not config.getoption("--skip-slow"):
        return
    marker = pytest.mark.skip(reason="--skip-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(marker)
