"""Shared fixtures: a small dataset and classifier reused across test modules.

Everything here is deliberately tiny (64-point clouds, narrow widths) so the
unit-test files stay fast; the full desk-scale run lives in test_acceptance.py
behind its own session fixture.
"""

import numpy as np
import pytest

from pcarmor.defense import build_feature_db
from pcarmor.geometry import build_dataset
from pcarmor.model import ModelConfig, train


@pytest.fixture(scope="session")
def tiny_data():
    train_clouds, test_clouds = build_dataset(12, seed=5, n_points=64)
    return train_clouds, test_clouds


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(per_point_widths=(16, 24, 32), head_widths=(24, 8), seed=7)


@pytest.fixture(scope="session")
def tiny_model(tiny_config, tiny_data):
    train_clouds, _ = tiny_data
    weights, metrics = train(tiny_config, train_clouds, epochs=60, batch_size=8)
    return weights, metrics


@pytest.fixture(scope="session")
def tiny_weights(tiny_model):
    return tiny_model[0]


@pytest.fixture(scope="session")
def tiny_db(tiny_weights, tiny_data):
    return build_feature_db(tiny_weights, tiny_data[0])


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
