import numpy as np
import pytest

from pmfn.phantom import retina_spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    """A 32x32, 4-location volume: quick enough for pipeline plumbing tests."""
    return retina_spec(32, 32, n_locations=4, n_repeats=3, speckle_looks=4.0, seed=5)


def ramp(h, w, sx=1.0, sy=0.0):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return sx * xx + sy * yy


def smooth_image(shape, seed=0, sigma=3.0):
    from scipy import ndimage

    raw = np.random.default_rng(seed).standard_normal(shape)
    out = ndimage.gaussian_filter(raw, sigma, mode="wrap")
    return (out - out.min()) / np.ptp(out)


@pytest.fixture(scope="session")
def smoke(tmp_path_factory):
    from smoke import run_smoke

    return run_smoke(str(tmp_path_factory.mktemp("smoke")), figures=True)
