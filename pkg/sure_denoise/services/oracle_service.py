"""Brute-force oracles that certify the risk estimators.

Monte-Carlo work is cut into fixed-size chunks, each drawing from its own ``oracle``
substream, and chunk results are concatenated in chunk order. The thread count
therefore changes wall time only, never the numbers.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from sure_denoise.config import Config
from sure_denoise.exceptions import ConfigError, NumericalError, ShapeError
from sure_denoise.models import ARCHITECTURES, Dataset, NoiseSpec, OracleReport, RiskObjective, TrainConfig
from sure_denoise.services.data_service import DataService
from sure_denoise.services.network_service import (
    IdentityDenoiser,
    LinearDenoiser,
    build_dncnn_lite,
    build_sda,
)
from sure_denoise.services.noise_service import NoiseService
from sure_denoise.services.risk_service import RiskService
from sure_denoise.services.training_service import TrainingService
from sure_denoise.utils.rng import Rng
from sure_denoise.utils.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

DIVERGENCE_REL_TOL = 0.02


def _single_image(y):
    y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if y.ndim == 3:
        y = y[None]
    if y.ndim != 4 or y.shape[0] != 1:
        raise ShapeError(f'oracles take a single (1, C, H, W) image, got shape {y.shape}')
    return y


def _chunks(total, chunk):
    return [min(chunk, total - start) for start in range(0, total, chunk)]


def _run_chunks(work, total, chunk, threads):
    sizes = _chunks(total, chunk)
    with no_grad():
        if threads > 1 and len(sizes) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(work, range(len(sizes)), sizes))
        else:
            parts = [work(i, n) for i, n in enumerate(sizes)]
    return np.concatenate(parts)


def _mean_stderr(values):
    n = len(values)
    mean = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return mean, stderr


class OracleService:
    @staticmethod
    def validate_divergence(d, y, eps, n_draws, seed=Config.DEFAULT_SEED,
                            h_fd=Config.FD_STEP, threads=1,
                            chunk=Config.ORACLE_CHUNK,
                            rel_tol=DIVERGENCE_REL_TOL):
        """Mean of ``n_draws`` single-probe divergence estimates against the exact divergence.

        Two checks must both hold. The mean has to sit within 4 standard errors of the exact
        divergence. On the same probes, the mean of the ``eps`` estimates has to be within
        ``rel_tol`` of the mean central-difference quadratic form n^t J n.
        """
        if n_draws < 2:
            raise ConfigError(f'n_draws must be >= 2, got {n_draws}')
        if not rel_tol > 0:
            raise ConfigError(f'rel_tol must be positive, got {rel_tol}')
        y = _single_image(y)
        k = y[0].size
        if isinstance(d, LinearDenoiser):
            oracle, rule_source = float(np.trace(d.matrix)), 'trace(A)'
        elif isinstance(d, IdentityDenoiser):
            oracle, rule_source = float(k), 'K'
        else:
            oracle = RiskService.exact_divergence_fd(d, y, h_fd=h_fd, mode='eval')
            rule_source = f'central differences, h={h_fd:g}'
        rng = Rng(seed).substream('oracle', 0)
        with no_grad():
            h_y = d(y, 'eval').data

        def work(index, n):
            probes = rng.substream('probe', index).normal((n,) + y.shape[1:])
            batch = np.repeat(y, n, axis=0)
            h_batch = Tensor(np.repeat(h_y, n, axis=0))
            mc = RiskService.mc_divergence(d, batch, eps, probes, mode='eval', h_y=h_batch).data
            plus = d(Tensor(batch + h_fd * probes), 'eval').data
            minus = d(Tensor(batch - h_fd * probes), 'eval').data
            quad = np.sum(probes * (plus - minus), axis=(1, 2, 3)) / (2.0 * h_fd)
            return np.stack([mc, quad], axis=1)

        draws = _run_chunks(work, n_draws, chunk, threads)
        estimate, stderr = _mean_stderr(draws[:, 0])
        quad_mean = float(np.mean(draws[:, 1]))
        gap = abs(estimate - quad_mean) / max(abs(quad_mean), np.finfo(float).tiny)
        multiple = Config.ORACLE_STDERR_MULTIPLE
        tolerance = multiple * stderr
        report = OracleReport(test='divergence', estimate=estimate, oracle=oracle, samples=n_draws,
                              stderr=stderr, tolerance=tolerance,
                              tolerance_rule=f'{multiple:g} x stderr; same-draw gap <= {rel_tol:.0%}',
                              passed=abs(estimate - oracle) <= tolerance and gap <= rel_tol,
                              linearization_gap=gap,
                              notes=[f'oracle: {rule_source}', f'epsilon={eps:g}', f'K={k}'])
        logger.info('divergence oracle: estimate %.6g vs %.6g, linearization gap %.3g (%s)', estimate,
                    oracle, gap, 'pass' if report.passed else 'FAIL')
        return report

    @staticmethod
    def _paired_report(test, estimates, truths, notes):
        diff_mean, stderr = _mean_stderr(estimates - truths)
        multiple = Config.ORACLE_STDERR_MULTIPLE
        tolerance = multiple * stderr
        notes = list(notes)
        if stderr == 0:
            tolerance = 1e-9 * (1.0 + abs(float(np.mean(truths))))
            notes.append('zero spread between estimator and true risk; exact comparison')
        return OracleReport(test=test, estimate=float(np.mean(estimates)), oracle=float(np.mean(truths)),
                            samples=len(estimates), stderr=stderr, tolerance=tolerance,
                            tolerance_rule=f'{multiple:g} x stderr of paired differences',
                            passed=abs(diff_mean) <= tolerance, notes=notes)

    @staticmethod
    def validate_unbiasedness(d, x_clean, sigma, realizations, eps=None,
                              seed=Config.DEFAULT_SEED, threads=1,
                              chunk=Config.ORACLE_CHUNK):
        """Mean per-image SURE over fresh Gaussian realizations against the mean true MSE."""
        if realizations < 2:
            raise ConfigError(f'realizations must be >= 2, got {realizations}')
        if not sigma > 0:
            raise ConfigError(f'sigma must be positive, got {sigma}')
        x = _single_image(x_clean)
        if eps is None:
            tag = getattr(d, 'architecture_tag', None)
            eps = (RiskService.epsilon_rule(tag, sigma * Config.INTENSITY_SCALE) if tag in ARCHITECTURES
                   else Config.SDA_EPSILON)
        rng = Rng(seed).substream('oracle', 1)

        def work(index, n):
            sub = rng.substream('corrupt', index)
            clean = np.repeat(x, n, axis=0)
            noisy = NoiseService.corrupt_gaussian(clean, sigma, sub)
            probes = rng.substream('probe', index).normal(clean.shape)
            per_sample, parts = RiskService.sure_terms(d, noisy, sigma, eps, Tensor(probes), mode='eval')
            mse = np.sum((parts['h_y'].data - clean) ** 2, axis=(1, 2, 3))
            return np.stack([per_sample.data, mse], axis=1)

        values = _run_chunks(work, realizations, chunk, threads)
        report = OracleService._paired_report('unbiasedness', values[:, 0], values[:, 1],
                                              [f'sigma={sigma:.6g}', f'epsilon={eps:g}'])
        logger.info('unbiasedness oracle: SURE %.6g vs MSE %.6g (%s)', report.estimate, report.oracle,
                    'pass' if report.passed else 'FAIL')
        return report

    @staticmethod
    def validate_pure(d, x_clean, zeta, realizations, eps_dot=Config.PURE_EPSILON,
                      seed=Config.DEFAULT_SEED, threads=1,
                      chunk=Config.ORACLE_CHUNK):
        """Same paired design as the Gaussian test, under Poisson corruption.

        Above the zeta threshold the report is informational and flags elevated variance.
        """
        if realizations < 2:
            raise ConfigError(f'realizations must be >= 2, got {realizations}')
        x = _single_image(x_clean)
        RiskService.check_pure_settings(zeta, eps_dot)
        rng = Rng(seed).substream('oracle', 2)

        def work(index, n):
            clean = np.repeat(x, n, axis=0)
            noisy = NoiseService.corrupt_poisson(clean, zeta, rng.substream('corrupt', index))
            probes = rng.substream('probe', index).rademacher(clean.shape)
            per_sample, parts = RiskService.pure_terms(d, noisy, zeta, eps_dot, Tensor(probes), mode='eval')
            mse = np.sum((parts['h_y'].data - clean) ** 2, axis=(1, 2, 3))
            return np.stack([per_sample.data, mse], axis=1)

        values = _run_chunks(work, realizations, chunk, threads)
        report = OracleService._paired_report('pure', values[:, 0], values[:, 1],
                                              [f'zeta={zeta:.6g}', f'epsilon={eps_dot:g}'])
        if zeta > Config.PURE_ZETA_WARN:
            report.informational = True
            report.elevated_variance = True
            report.notes.append(f'zeta above {Config.PURE_ZETA_WARN}: result is informational')
        logger.info('pure oracle: PURE %.6g vs MSE %.6g (%s)', report.estimate, report.oracle,
                    'info' if report.informational else ('pass' if report.passed else 'FAIL'))
        return report

    @staticmethod
    def epsilon_sweep(arch, sigma, eps_grid, train, test,
                      cfg=None, seed=Config.DEFAULT_SEED):
        """Short SURE runs, one per epsilon; aborted runs are recorded rather than raised."""
        if not eps_grid:
            raise ConfigError('eps_grid must not be empty')
        noise = NoiseSpec(sigma=sigma)
        base = cfg or TrainConfig(epochs=5, batch_size=min(Config.TRAIN_BATCH_SIZE, len(train)), seed=seed)
        train = train if train.noisy is not None else DataService.corrupt_dataset(train, noise, Rng(seed))
        test_clean = test.require_clean('the epsilon sweep PSNR')
        test_noisy = test.noisy
        if test_noisy is None:
            test_noisy = NoiseService.corrupt(test_clean, noise, Rng(seed).substream('validation'))[0].data
        rows = []
        for eps in eps_grid:
            init = Rng(base.seed).substream('init')
            if arch == 'sda':
                d = build_sda(train.channels, rng=init)
            else:
                d = build_dncnn_lite(in_channels=train.channels, rng=init)
            row = {'epsilon': float(eps), 'status': 'ok', 'final_psnr': None, 'final_loss': None,
                   'loss_noise': None, 'error': None}
            try:
                run_cfg = replace(base, objective=RiskObjective('sure', eps), noise=noise)
                result = TrainingService.train(d, train, run_cfg)
                with no_grad():
                    denoised = d(test_noisy, 'eval').data
                losses = [r.loss for r in result.history]
                row['final_psnr'] = DataService.mean_psnr(denoised, test_clean)
                row['final_loss'] = losses[-1] if losses else None
                row['loss_noise'] = float(np.std(np.diff(losses))) if len(losses) > 1 else 0.0
            except (NumericalError, ConfigError) as exc:
                row['status'] = 'aborted'
                row['error'] = str(exc)
                logger.warning('epsilon %g: run aborted (%s)', eps, exc)
            rows.append(row)
            logger.info('epsilon %g: %s psnr=%s', eps, row['status'], row['final_psnr'])
        return rows
