import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_addoption(parser):
    parser.addoption("--quick", action="store_true", default=False,
                     help="skip the long-running acceptance checks")


@pytest.fixture
def quick(request):
    return request.config.getoption("--quick")
