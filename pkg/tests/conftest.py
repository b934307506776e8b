import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_boxes(rng, n, extent=50.0, min_size=1.0):
    xy = rng.uniform(0, extent, size=(n, 2))
    wh = rng.uniform(min_size, extent / 2, size=(n, 2))
    return np.column_stack([xy, xy + wh])
