import numpy as np
import pytest

from segsense.masks import Mask


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def make_mask(rows, source_id=""):
    return Mask(data=np.asarray(rows, dtype=np.uint8), source_id=source_id)
