"""Risk estimators used as training losses.

All estimator losses share one layout: per-sample data fidelity, minus the noise
constant, plus the Monte-Carlo divergence term, averaged over the batch. Ground
truth, when passed, only feeds the ``mse_vs_gt`` diagnostic of the report.
"""
import logging
import warnings

import numpy as np

from sure_denoise.config import Config
from sure_denoise.exceptions import (
    ConfigError,
    EstimatorVarianceWarning,
    GroundTruthUnavailableError,
    NumericalError,
    ShapeError,
)
from sure_denoise.models import LossReport, NoiseSpec, RiskObjective
from sure_denoise.services.noise_service import NoiseService
from sure_denoise.utils.rng import Rng
from sure_denoise.utils.tensor import Tensor, as_tensor, no_grad, reduce_mean, reduce_sum

logger = logging.getLogger(__name__)

_SAMPLE_AXES = (1, 2, 3)


def _as_batch(y):
    y = as_tensor(y)
    if y.ndim == 3:
        y = Tensor(y.data[None])
    if y.ndim != 4:
        raise ShapeError(f'expected a (M, C, H, W) batch, got shape {y.shape}')
    return y


def _per_sample(values, m, what):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(m, float(arr))
    if arr.shape != (m,):
        raise ShapeError(f'{what}: expected {m} per-sample values, got shape {arr.shape}')
    return arr


def _column(values):
    return values.reshape(-1, 1, 1, 1)


def _probe(y, probe, rng, kind):
    if probe is not None:
        probe = as_tensor(probe).detach()
        if probe.shape != y.shape:
            raise ShapeError(f'probe shape {probe.shape} does not match batch shape {y.shape}')
        return probe
    if rng is None:
        raise ConfigError('either a probe or an rng is required')
    return NoiseService.probe_like(y, kind, rng)


def _diagnostic_mse(h_y, x):
    if x is None:
        return None
    clean = as_tensor(x).data.reshape(h_y.shape)
    return float(np.mean(np.sum((h_y.data - clean) ** 2, axis=_SAMPLE_AXES)))


class RiskService:
    @staticmethod
    def epsilon_rule(arch, sigma):
        """Probe step for a noise level given on the 0-255 scale."""
        if arch == 'sda':
            return Config.SDA_EPSILON if np.ndim(sigma) == 0 else np.full(np.shape(sigma), Config.SDA_EPSILON)
        if arch == 'dncnn_lite':
            return sigma * Config.RESIDUAL_EPSILON_SCALE
        if arch == 'blind':
            return sigma * Config.BLIND_EPSILON_SCALE
        raise ConfigError(f'no epsilon rule for architecture {arch!r}')

    @staticmethod
    def mse_loss(h_out, x):
        """(1/M) sum_j ||h_j - x_j||^2."""
        h_out, x = as_tensor(h_out), as_tensor(x)
        if h_out.shape != x.shape:
            raise ShapeError(f'mse_loss: output {h_out.shape} and target {x.shape} differ')
        diff = h_out - x
        return reduce_sum(diff * diff) / h_out.shape[0]

    @staticmethod
    def mse_reg_loss(h_out, y):
        return RiskService.mse_loss(h_out, y)

    @staticmethod
    def mc_divergence(d, y, eps, n_tilde, mode='train', h_y=None):
        """Per-sample n^t (h(y + eps n) - h(y)) / eps; both forwards stay on the tape."""
        y = _as_batch(y)
        m = y.shape[0]
        eps = _per_sample(eps, m, 'epsilon')
        if not np.all(eps > 0):
            raise ConfigError(f'epsilon must be positive, got {eps.min()}')
        n_tilde = as_tensor(n_tilde).detach()
        if n_tilde.shape != y.shape:
            raise ShapeError(f'probe shape {n_tilde.shape} does not match batch shape {y.shape}')
        if h_y is None:
            h_y = d(y, mode)
        perturbed = d(Tensor(y.data + _column(eps) * n_tilde.data), mode)
        return reduce_sum(n_tilde * (perturbed - h_y), axis=_SAMPLE_AXES) / eps

    @staticmethod
    def exact_divergence_fd(d, y, h_fd=Config.FD_STEP, mode='eval', chunk=64):
        """sum_i [h_i(y + h e_i) - h_i(y - h e_i)] / (2h) over all K pixels of one image."""
        y = _as_batch(y)
        if y.shape[0] != 1:
            raise ShapeError(f'exact divergence takes one image, got a batch of {y.shape[0]}')
        k = y.size
        if k > Config.MAX_EXACT_DIVERGENCE_PIXELS:
            raise ShapeError(f'exact divergence needs K <= {Config.MAX_EXACT_DIVERGENCE_PIXELS}, got {k}')
        base = y.data.reshape(-1)
        total = 0.0
        with no_grad():
            for start in range(0, k, chunk):
                idx = np.arange(start, min(start + chunk, k))
                rows = np.arange(len(idx))
                plus = np.repeat(base[None], len(idx), axis=0)
                minus = plus.copy()
                plus[rows, idx] += h_fd
                minus[rows, idx] -= h_fd
                shape = (len(idx),) + y.shape[1:]
                out_plus = d(Tensor(plus.reshape(shape)), mode).data.reshape(len(idx), k)
                out_minus = d(Tensor(minus.reshape(shape)), mode).data.reshape(len(idx), k)
                total += float(np.sum(out_plus[rows, idx] - out_minus[rows, idx]))
        return total / (2.0 * h_fd)

    @staticmethod
    def sure_terms(d, y, sigma, eps, probe, mode='train'):
        """Per-sample MC-SURE values and their parts as (M,) tensors/arrays."""
        y = _as_batch(y)
        m = y.shape[0]
        k = y.size // m
        sigma = _per_sample(sigma, m, 'sigma')
        eps = _per_sample(eps, m, 'epsilon')
        if not np.all(sigma > 0):
            raise ConfigError(f'sigma must be positive for every sample, min is {sigma.min()}')
        h_y = d(y, mode)
        resid = y - h_y
        fidelity = reduce_sum(resid * resid, axis=_SAMPLE_AXES)
        divergence = RiskService.mc_divergence(d, y, eps, probe, mode, h_y=h_y)
        noise = k * sigma ** 2
        div_term = divergence * (2.0 * sigma ** 2)
        per_sample = fidelity - noise + div_term
        return per_sample, {'h_y': h_y, 'fidelity': fidelity, 'noise': noise,
                            'divergence': divergence, 'divergence_term': div_term}

    @staticmethod
    def _report(kind, loss, parts, x, eps):
        eps = np.asarray(eps, dtype=np.float64)
        return LossReport(
            objective=kind,
            loss=loss.item(),
            data_fidelity=float(np.mean(parts['fidelity'].data)),
            noise_term=float(np.mean(parts['noise'])),
            divergence_estimate=float(np.mean(parts['divergence'].data)),
            divergence_term=float(np.mean(parts['divergence_term'].data)),
            mse_vs_gt=_diagnostic_mse(parts['h_y'], x),
            epsilon=float(eps.mean()),
        )

    @staticmethod
    def _estimator(kind, d, y, sigma, eps, rng, probe, x, mode):
        y = _as_batch(y)
        probe = _probe(y, probe, rng, 'gaussian')
        try:
            per_sample, parts = RiskService.sure_terms(d, y, sigma, eps, probe, mode)
            loss = reduce_mean(per_sample)
        except NumericalError as exc:
            raise NumericalError(f'{kind} loss aborted (epsilon={np.mean(eps):.3g}, '
                                 f'sigma={np.mean(sigma):.4g}): {exc}') from exc
        return loss, RiskService._report(kind, loss, parts, x, eps)

    @staticmethod
    def sure_loss(d, y_batch, sigma, eps, rng=None, probe=None,
                  x=None, mode='train'):
        """MC-SURE averaged over the batch; ``x`` only feeds the diagnostic MSE."""
        if not eps > 0:
            raise ConfigError(f'epsilon must be positive, got {eps}')
        return RiskService._estimator('sure', d, y_batch, sigma, eps, rng, probe, x, mode)

    @staticmethod
    def blind_sure_loss(d, y_batch, sigma_per_sample, eps=None, rng=None,
                        probe=None, x=None, mode='train'):
        """SURE with per-sample sigma_j and eps_j; ``eps=None`` applies the blind rule."""
        sigma = np.asarray(sigma_per_sample, dtype=np.float64)
        if eps is None:
            eps = RiskService.epsilon_rule('blind', sigma * Config.INTENSITY_SCALE)
        return RiskService._estimator('blind_sure', d, y_batch, sigma, eps, rng, probe, x, mode)

    @staticmethod
    def sure_ft_loss(d, y_test, sigma, eps, rng=None, probe=None,
                     mode='train'):
        y = _as_batch(y_test)
        if y.shape[0] != 1:
            raise ShapeError(f'refinement works on a single image, got a batch of {y.shape[0]}')
        if not eps > 0:
            raise ConfigError(f'epsilon must be positive, got {eps}')
        return RiskService._estimator('sure_ft', d, y, sigma, eps, rng, probe, None, mode)

    @staticmethod
    def pure_terms(d, y, zeta, eps_dot, probe, mode='train'):
        y = _as_batch(y)
        h_y = d(y, mode)
        resid = y - h_y
        fidelity = reduce_sum(resid * resid, axis=_SAMPLE_AXES)
        noise = zeta * np.sum(y.data, axis=_SAMPLE_AXES)
        perturbed = d(Tensor(y.data + eps_dot * probe.data), mode)
        weights = Tensor(probe.data * y.data)
        divergence = reduce_sum(weights * (perturbed - h_y), axis=_SAMPLE_AXES) / eps_dot
        div_term = divergence * (2.0 * zeta)
        per_sample = fidelity - noise + div_term
        return per_sample, {'h_y': h_y, 'fidelity': fidelity, 'noise': noise,
                            'divergence': divergence, 'divergence_term': div_term}

    @staticmethod
    def pure_loss(d, y_batch, zeta, eps_dot=Config.PURE_EPSILON,
                  rng=None, probe=None, x=None, mode='train'):
        """Poisson unbiased risk estimate with a Rademacher probe."""
        if not zeta > 0:
            raise ConfigError(f'zeta must be positive, got {zeta}')
        if not eps_dot > 0:
            raise ConfigError(f'epsilon must be positive, got {eps_dot}')
        RiskService.check_pure_settings(zeta, eps_dot)
        y = _as_batch(y_batch)
        probe = _probe(y, probe, rng, 'binary')
        try:
            per_sample, parts = RiskService.pure_terms(d, y, zeta, eps_dot, probe, mode)
            loss = reduce_mean(per_sample)
        except NumericalError as exc:
            raise NumericalError(f'pure loss aborted (epsilon={eps_dot:.3g}, zeta={zeta:.4g}): {exc}') from exc
        return loss, RiskService._report('pure', loss, parts, x, eps_dot)

    @staticmethod
    def check_pure_settings(zeta, eps_dot):
        if zeta > Config.PURE_ZETA_WARN:
            message = (f'zeta={zeta:.3g} exceeds {Config.PURE_ZETA_WARN}: the PURE estimate has high '
                       f'variance and training is not expected to converge')
            logger.warning(message)
            warnings.warn(message, EstimatorVarianceWarning, stacklevel=3)
        lo, hi = Config.PURE_EPSILON_RANGE
        if not lo <= eps_dot <= hi:
            logger.warning('PURE epsilon %.3g is outside the admissible range [%g, %g]', eps_dot, lo, hi)

    @staticmethod
    def resolve_epsilon(objective, arch, noise,
                        sigma_per_sample=None):
        if objective.epsilon is not None:
            return objective.epsilon
        if objective.kind == 'pure':
            return Config.PURE_EPSILON
        if objective.kind == 'blind_sure':
            return RiskService.epsilon_rule('blind', sigma_per_sample * Config.INTENSITY_SCALE)
        if objective.kind in ('sure', 'sure_ft'):
            return RiskService.epsilon_rule(arch, noise.sigma * Config.INTENSITY_SCALE)
        return None

    @staticmethod
    def evaluate(d, y, objective, noise, arch,
                 x=None, sigma_per_sample=None, probe=None, rng=None,
                 mode='train'):
        y = _as_batch(y)
        kind = objective.kind
        if kind == 'mse_gt':
            if x is None:
                raise GroundTruthUnavailableError('mse_gt needs clean images in every batch')
            h_y = d(y, mode)
            loss = RiskService.mse_loss(h_y, x)
            return loss, LossReport(kind, loss.item(), loss.item(), mse_vs_gt=loss.item())
        if kind == 'mse_reg':
            h_y = d(y, mode)
            loss = RiskService.mse_reg_loss(h_y, y)
            return loss, LossReport(kind, loss.item(), loss.item(), mse_vs_gt=_diagnostic_mse(h_y, x))
        if noise is None:
            raise ConfigError(f'{kind} needs a noise specification')
        if kind == 'pure':
            eps = RiskService.resolve_epsilon(objective, arch, noise)
            return RiskService.pure_loss(d, y, noise.zeta, eps, rng=rng, probe=probe, x=x, mode=mode)
        if kind == 'blind_sure':
            if sigma_per_sample is None:
                raise ConfigError('blind_sure needs a per-sample sigma for every batch')
            eps = RiskService.resolve_epsilon(objective, arch, noise, sigma_per_sample)
            return RiskService.blind_sure_loss(d, y, sigma_per_sample, eps, rng=rng, probe=probe, x=x, mode=mode)
        eps = RiskService.resolve_epsilon(objective, arch, noise)
        return RiskService.sure_loss(d, y, noise.sigma, eps, rng=rng, probe=probe, x=x, mode=mode)
