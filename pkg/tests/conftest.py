import numpy as np
import pytest

from cellseg.instances import Instance, PredictionSet


def mask_from(coords, shape):
    """Build a bool mask from an iterable of (row, col) pixels."""
    m = np.zeros(shape, dtype=bool)
    for r, c in coords:
        m[r, c] = True
    return m


def make_instance(coords, shape, instance_id="i1", class_label="whole_cell",
                  score=1.0, source="test"):
    return Instance(instance_id, class_label, mask_from(coords, shape), score, source)


def random_mask(rng, shape, density=0.4):
    return rng.random(shape) < density


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_set(image_id, source, instances, shape):
    return PredictionSet(
        image_id=image_id, source=source, height=shape[0], width=shape[1],
        instances=instances,
    )
