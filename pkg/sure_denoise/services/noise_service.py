import logging

import numpy as np

from sure_denoise.exceptions import ConfigError, DataError
from sure_denoise.models import NoiseSpec
from sure_denoise.utils.rng import Rng
from sure_denoise.utils.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class NoiseService:
    @staticmethod
    def corrupt_gaussian(x, sigma, rng):
        """y = x + sigma * g with g i.i.d. standard normal."""
        if not sigma > 0:
            raise ConfigError(f'sigma must be positive, got {sigma}')
        clean = _values(x)
        return Tensor(clean + sigma * rng.normal(clean.shape))

    @staticmethod
    def corrupt_gaussian_per_sample(x, sigmas, rng):
        clean = _values(x)
        sigmas = np.asarray(sigmas, dtype=np.float64)
        if sigmas.shape != (clean.shape[0],):
            raise ConfigError(f'{len(sigmas)} sigmas for {clean.shape[0]} images')
        scale = sigmas.reshape((-1,) + (1,) * (clean.ndim - 1))
        return Tensor(clean + scale * rng.normal(clean.shape))

    @staticmethod
    def corrupt_poisson(x, zeta, rng):
        """y = zeta * z with z ~ Poisson(x / zeta), so E[y] = x and Var[y] = zeta * x."""
        if not zeta > 0:
            raise ConfigError(f'zeta must be positive, got {zeta}')
        clean = _values(x)
        if np.any(clean < 0):
            raise DataError(f'poisson corruption needs non-negative intensities, min is {clean.min():.4g}')
        # numpy samples by inversion below mean 10 and by PTRS rejection above
        return Tensor(zeta * rng.poisson(clean / zeta).astype(np.float64))

    @staticmethod
    def perturb_gaussian(shape, rng):
        return Tensor(rng.normal(shape))

    @staticmethod
    def perturb_binary(shape, rng):
        """Rademacher probe: entries -1 or +1 with probability 0.5 each."""
        return Tensor(rng.rademacher(shape))

    @staticmethod
    def sample_sigma(sigma_range, rng, size=None):
        lo, hi = sigma_range
        if not 0 <= lo <= hi:
            raise ConfigError(f'invalid sigma range {sigma_range}')
        if lo == hi:
            return float(lo) if size is None else np.full(size, float(lo))
        return float(rng.uniform(lo, hi)) if size is None else rng.uniform(lo, hi, size)

    @staticmethod
    def corrupt(x, spec, rng):
        """Corrupt a (N, ...) batch; returns the noisy batch and per-image sigma (gaussian only).

        Corruption noise comes from the ``corrupt`` substream of ``rng`` and blind sigma
        draws from its ``sigma`` substream.
        """
        clean = _values(x)
        n = clean.shape[0]
        if spec.kind == 'poisson':
            return NoiseService.corrupt_poisson(clean, spec.zeta, rng.substream('corrupt')), None
        if spec.blind:
            sigmas = NoiseService.sample_sigma(spec.sigma_range, rng.substream('sigma'), size=n)
            noisy = NoiseService.corrupt_gaussian_per_sample(clean, sigmas, rng.substream('corrupt'))
            return noisy, np.asarray(sigmas, dtype=np.float64)
        noisy = NoiseService.corrupt_gaussian(clean, spec.sigma, rng.substream('corrupt'))
        return noisy, np.full(n, spec.sigma)

    @staticmethod
    def probe_like(y, kind, rng):
        y = as_tensor(y)
        if kind == 'binary':
            return NoiseService.perturb_binary(y.shape, rng)
        return NoiseService.perturb_gaussian(y.shape, rng)
