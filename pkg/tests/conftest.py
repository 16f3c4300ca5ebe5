import sys
from pathlib import Path

import numpy as np
import pytest

# make the sibling mockserver module importable from every test file
sys.path.insert(0, str(Path(__file__).parent))

from tpat.core import seeded_rng


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pm1(shape, seed=0, stream="test"):
    """Seeded +-1 array helper shared across test modules."""
    return seeded_rng(seed, stream).integers(0, 2, size=shape) * 2.0 - 1.0
