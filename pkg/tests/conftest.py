import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from doselearn.dataset import generate_setting  # noqa: E402


@pytest.fixture(scope="session")
def setting1_small():
    trial, gt = generate_setting(1, 50, 10, seed=3)
    return trial, gt


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)

