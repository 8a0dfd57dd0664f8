import numpy as np
import pytest

from aortaseg.volume import Volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_image(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return Volume(np.asarray(data, dtype=np.float32), spacing, origin, "image")


def make_label(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return Volume(np.asarray(data, dtype=np.int16), spacing, origin, "label")
