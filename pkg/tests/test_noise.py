import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from sure_denoise.exceptions import ConfigError, DataError
from sure_denoise.models import NoiseSpec
from sure_denoise.services.noise_service import NoiseService
from sure_denoise.utils.rng import Rng


def test_gaussian_statistics():
    x = np.full((4, 1, 50, 50), 0.5)
    y = NoiseService.corrupt_gaussian(x, 0.1, Rng(0)).data
    residual = y - x
    assert abs(residual.mean()) < 0.005
    assert abs(residual.std() - 0.1) < 0.005


def test_gaussian_needs_positive_sigma():
    with pytest.raises(ConfigError):
        NoiseService.corrupt_gaussian(np.zeros((1, 1, 2, 2)), 0.0, Rng(0))


def test_poisson_mean_and_variance():
    x = np.full((8, 1, 50, 50), 0.4)
    y = NoiseService.corrupt_poisson(x, 0.05, Rng(1)).data
    assert abs(y.mean() - 0.4) < 0.005
    assert abs(y.var() - 0.05 * 0.4) < 0.002
    # samples live on the zeta lattice
    assert np.allclose(y / 0.05, np.round(y / 0.05))


def test_poisson_rejects_negative_intensities():
    with pytest.raises(DataError):
        NoiseService.corrupt_poisson(np.full((1, 1, 2, 2), -0.1), 0.1, Rng(0))


def test_poisson_needs_positive_zeta():
    with pytest.raises(ConfigError):
        NoiseService.corrupt_poisson(np.zeros((1, 1, 2, 2)), 0.0, Rng(0))


def test_binary_probe_is_rademacher():
    probe = NoiseService.perturb_binary((2, 1, 40, 40), Rng(2)).data
    assert set(np.unique(probe)) == {-1.0, 1.0}
    assert abs(probe.mean()) < 0.1


def test_probe_like_kinds():
    y = np.zeros((1, 1, 6, 6))
    assert set(np.unique(NoiseService.probe_like(y, 'binary', Rng(0)).data)) <= {-1.0, 1.0}
    assert NoiseService.probe_like(y, 'gaussian', Rng(0)).shape == y.shape


def test_same_stream_same_noise():
    x = np.zeros((2, 1, 5, 5))
    a = NoiseService.corrupt_gaussian(x, 0.2, Rng(9).substream('corrupt')).data
    b = NoiseService.corrupt_gaussian(x, 0.2, Rng(9).substream('corrupt')).data
    c = NoiseService.corrupt_gaussian(x, 0.2, Rng(10).substream('corrupt')).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_per_sample_sigma_count():
    with pytest.raises(ConfigError):
        NoiseService.corrupt_gaussian_per_sample(np.zeros((3, 1, 2, 2)), [0.1, 0.2], Rng(0))


def test_per_sample_sigma_scales_each_image():
    x = np.zeros((2, 1, 60, 60))
    y = NoiseService.corrupt_gaussian_per_sample(x, [0.01, 0.3], Rng(3)).data
    assert abs(y[0].std() - 0.01) < 0.002
    assert abs(y[1].std() - 0.3) < 0.03


@settings(max_examples=30, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(lo=st.floats(0.0, 0.1), width=st.floats(0.001, 0.2), seed=st.integers(0, 1000))
def test_sampled_sigma_stays_in_range(lo, width, seed):
    draws = NoiseService.sample_sigma((lo, lo + width), Rng(seed), size=20)
    assert np.all((draws >= lo) & (draws <= lo + width))


def test_sample_sigma_degenerate_range():
    assert NoiseService.sample_sigma((0.1, 0.1), Rng(0)) == 0.1
    with pytest.raises(ConfigError):
        NoiseService.sample_sigma((0.2, 0.1), Rng(0))


def test_corrupt_blind_returns_sigmas():
    spec = NoiseSpec.from_255(sigma_range=(0.0, 55.0))
    noisy, sigmas = NoiseService.corrupt(np.zeros((6, 1, 4, 4)), spec, Rng(4))
    assert noisy.shape == (6, 1, 4, 4)
    assert sigmas.shape == (6,)
    assert np.all((sigmas >= 0.0) & (sigmas <= 55.0 / 255.0))


def test_corrupt_fixed_and_poisson():
    x = np.full((3, 1, 4, 4), 0.5)
    _, sigmas = NoiseService.corrupt(x, NoiseSpec.from_255(sigma=25.0), Rng(5))
    assert np.allclose(sigmas, 25.0 / 255.0)
    noisy, sigmas = NoiseService.corrupt(x, NoiseSpec(kind='poisson', zeta=0.1), Rng(5))
    assert sigmas is None
    assert np.all(noisy.data >= 0)


@pytest.mark.parametrize('kwargs', [
    {'kind': 'gaussian'},
    {'kind': 'gaussian', 'sigma': 0.1, 'sigma_range': (0.0, 0.2)},
    {'kind': 'gaussian', 'sigma_range': (0.2, 0.1)},
    {'kind': 'poisson'},
    {'kind': 'speckle', 'sigma': 0.1},
])
def test_noise_spec_rejects(kwargs):
    with pytest.raises(ConfigError):
        NoiseSpec(**kwargs)


def test_noise_spec_scaling():
    spec = NoiseSpec.from_255(sigma=51.0)
    assert spec.sigma == pytest.approx(0.2)
    assert not spec.blind
