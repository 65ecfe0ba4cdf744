import numpy as np
import pytest

from src.config import DatasetError
from src.data import Sample
from src.imputation import NearestNeighborIndex, impute_average, impute_nn, impute_zero, nearest_neighbor


@pytest.fixture
def sample():
    images = np.stack([np.full((4, 4), 0.2), np.full((4, 4), 0.4), np.full((4, 4), 0.9)])
    return Sample(images=images, visibility=[True, True, False], id="s")


def test_impute_zero(sample):
    out = impute_zero(sample)
    assert np.array_equal(out[:2], sample.images[:2])
    assert not out[2].any()


def test_impute_average_uses_visible_domains(sample):
    out = impute_average(sample)
    assert np.array_equal(out[:2], sample.images[:2])
    assert np.allclose(out[2], 0.3)


def test_impute_average_with_one_visible_domain(sample):
    one = sample.with_visibility([False, True, False])
    out = impute_average(one)
    assert np.array_equal(out[0], sample.images[1])
    assert np.array_equal(out[2], sample.images[1])


def test_nearest_neighbor_retrieves_itself(tiny_dataset):
    target = tiny_dataset.train[3]
    masked = target.with_visibility([True, False])
    index, distance = nearest_neighbor(masked, tiny_dataset.train)
    assert index == 3 and distance == 0.0
    assert np.array_equal(impute_nn(masked, tiny_dataset.train)[1], target.images[1])


def test_nearest_neighbor_only_looks_at_visible_domains():
    train = [
        Sample(images=np.stack([np.zeros((2, 2)), np.ones((2, 2))]), id="a"),
        Sample(images=np.stack([np.ones((2, 2)), np.zeros((2, 2))]), id="b"),
    ]
    query = Sample(images=np.stack([np.full((2, 2), 0.9), np.zeros((2, 2))]), visibility=[True, False])
    index, distance = NearestNeighborIndex(train).query(query)
    assert index == 1
    assert distance == pytest.approx(0.2, abs=1e-6)
    assert np.array_equal(impute_nn(query, train)[1], np.zeros((2, 2)))


def test_nearest_neighbor_needs_training_data(sample):
    with pytest.raises(DatasetError, match="non-empty"):
        impute_nn(sample, [])


def test_nearest_neighbor_can_exclude_the_query_itself(tiny_dataset):
    index = NearestNeighborIndex(tiny_dataset.train)
    masked = tiny_dataset.train[3].with_visibility([True, False])
    neighbor, distance = index.query(masked, exclude=3)
    assert neighbor != 3 and distance > 0.0
    assert np.array_equal(index.impute(masked, exclude=3)[1], tiny_dataset.train[neighbor].images[1])
    with pytest.raises(DatasetError, match="at least two"):
        NearestNeighborIndex(tiny_dataset.train[:1]).query(masked, exclude=0)
