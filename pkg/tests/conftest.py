import numpy as np
import pytest

from patchsim import autodiff


@pytest.fixture(autouse=True)
def _debug_checks():
    autodiff.set_debug_checks(True)
    yield
    autodiff.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
