import numpy as np
import pytest

from csbm import ModelParams, make_supervision, sample_instance


@pytest.fixture(scope="session")
def small_instance():
    params = ModelParams.from_alpha(2000, 10.0, avg_degree=5.0, snr_lambda=1.2, snr_mu=2.0)
    return sample_instance(params, 11)


@pytest.fixture(scope="session")
def small_supervised(small_instance):
    return small_instance, make_supervision(small_instance, 0.1, 1.0, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
