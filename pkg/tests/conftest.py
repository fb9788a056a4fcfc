import numpy as np
import pytest

from potvit.dataset import DatasetConfig, make_dataset
from potvit.intengine import build_quantized_model
from potvit.quantizer import QuantConfig, calibrate
from potvit.refmodel import ModelConfig, train, weight_layer_names


@pytest.fixture(scope="session")
def dataset():
    return make_dataset(DatasetConfig())


@pytest.fixture(scope="session")
def model(dataset):
    return train(ModelConfig(), dataset, epochs=30, seed=0)


@pytest.fixture(scope="session")
def calib(dataset):
    xs = dataset.calibration(100)
    ys = dataset.train[1][:100]
    return xs, ys


@pytest.fixture(scope="session")
def qparams(model, calib):
    return calibrate(model, calib[0], QuantConfig())


@pytest.fixture(scope="session")
def qmodel(model, qparams):
    return build_quantized_model(model, qparams)


@pytest.fixture(scope="session")
def layer_names(model):
    return weight_layer_names(model.config)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
