import sys
from pathlib import Path

import numpy as np
import pytest

from sfgmask.core import CameraIntrinsics

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def K():
    return CameraIntrinsics(60.0, 60.0, 32.0, 24.0, 64, 48)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fixtures():
    return FIXTURES
