import os
from pathlib import Path

import numpy as np
import pytest

from sure_denoise.models import Dataset, NoiseSpec
from sure_denoise.services.data_service import DataService
from sure_denoise.services.network_service import build_dncnn_lite, build_sda
from sure_denoise.utils.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def sda():
    return build_sda(rng=Rng(7).substream('init'))


@pytest.fixture
def tiny_dncnn():
    return build_dncnn_lite(depth=3, channels=4, rng=Rng(7).substream('init'))


@pytest.fixture
def strokes():
    return DataService.generate_synthetic(12, (28, 28), 'strokes', Rng(3))


@pytest.fixture
def noisy_strokes(strokes):
    return DataService.corrupt_dataset(strokes, NoiseSpec.from_255(sigma=25.0), Rng(5))


@pytest.fixture
def small_noisy():
    clean = DataService.generate_synthetic(8, (10, 10), 'gradients', Rng(11)).clean
    ds = Dataset(name='small', clean=clean)
    return DataService.corrupt_dataset(ds, NoiseSpec.from_255(sigma=25.0), Rng(12))


@pytest.fixture
def mnist_dir():
    location = os.environ.get('SURE_DENOISE_MNIST_DIR')
    if not location or not Path(location).is_dir():
        pytest.skip('SURE_DENOISE_MNIST_DIR is not set')
    return Path(location)


def _gradcheck(fn, tensors, h=1e-6, max_entries=12, seed=0):
    """Largest relative gap between backward gradients and central differences of ``fn()``.

    Gaps are scaled by max(|numeric|, |exact|, 1e-3). For smaller gradients, float64
    round-off in ``fn()`` (about 1e-16 * |fn| / h) is no longer small next to 1e-4 of the gradient.
    """
    for t in tensors:
        t.zero_grad()
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    picker = np.random.default_rng(seed)
    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in picker.choice(flat.size, min(max_entries, flat.size), replace=False):
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            exact = grad.reshape(-1)[i]
            worst = max(worst, abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-3))
    return worst


@pytest.fixture
def gradcheck():
    return _gradcheck
