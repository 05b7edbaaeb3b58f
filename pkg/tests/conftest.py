import os

import numpy as np
import pytest

# reuse convolution tables across test sessions
os.environ.setdefault(
    "VLAMAX_CACHE", os.path.join(os.path.dirname(__file__), "..", ".vlamax-cache")
)

from vlamax.formfactor import make_standard_profile, rescale  # noqa: E402


@pytest.fixture(scope="session")
def chi():
    return make_standard_profile()


@pytest.fixture(scope="session")
def chi_half(chi):
    # r_N = 0.5 (the 4096^(-1/12) rescaling)
    return rescale(chi, 4096, 1.0 / 12.0)


@pytest.fixture
def rng(request):
    # deterministic per test, independent of execution order
    import zlib

    return np.random.default_rng(zlib.crc32(request.node.name.encode()))
