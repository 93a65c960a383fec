import logging

import numpy as np

from sure_denoise.commands.common import (
    as_image_batch,
    load_dataset,
    load_run_config,
    seed_of,
    start_run,
    threads_of,
    write_json,
)
from sure_denoise.config import Config
from sure_denoise.exceptions import ValidationFailure
from sure_denoise.models import OracleReport, TrainConfig
from sure_denoise.services.checkpoint_service import CheckpointService
from sure_denoise.services.data_service import DataService
from sure_denoise.services.network_service import (
    IdentityDenoiser,
    LinearDenoiser,
    build_dncnn_lite,
    build_sda,
)
from sure_denoise.services.noise_service import NoiseService
from sure_denoise.services.oracle_service import OracleService
from sure_denoise.services.risk_service import RiskService
from sure_denoise.utils import imageio
from sure_denoise.utils.rng import Rng
from sure_denoise.utils.validators import SUITES

logger = logging.getLogger(__name__)

DEFAULT_SUITES = ['divergence', 'unbiasedness', 'pure']
LINEAR_SIZE = 4
EPSILON_SPREAD_DB = 0.3


def register(subparsers, common):
    parser = subparsers.add_parser('validate', parents=[common], help='run the estimator oracles')
    parser.add_argument('suites', nargs='*', metavar='suite',
                        help=f'any of: {", ".join(SUITES)} (default: {", ".join(DEFAULT_SUITES)})')
    parser.add_argument('--arch', choices=['sda', 'dncnn_lite', 'identity', 'linear'])
    parser.add_argument('--checkpoint', help='validate a trained network instead of a fresh one')
    parser.add_argument('--image', help='clean test image (PGM or .npy)')
    parser.add_argument('--sigma', type=float, help='noise level on the 0-255 scale')
    parser.add_argument('--epsilon', type=float)
    parser.add_argument('--zeta', type=float)
    parser.add_argument('--n-draws', type=int)
    parser.add_argument('--realizations', type=int)
    parser.add_argument('--epochs', type=int, help='epochs per run of the epsilon sweep')
    parser.set_defaults(handler=run)


def _denoiser(block, seed):
    if block.get('checkpoint'):
        return CheckpointService.to_denoiser(CheckpointService.load_checkpoint(block['checkpoint']))
    arch = block.get('arch', 'sda')
    init = Rng(seed).substream('init')
    if arch == 'identity':
        return IdentityDenoiser()
    if arch == 'linear':
        a = init.normal((LINEAR_SIZE, LINEAR_SIZE))
        return LinearDenoiser((a + a.T) / 2.0)
    if arch == 'dncnn_lite':
        return build_dncnn_lite(rng=init)
    return build_sda(rng=init)


def _clean_image(block, denoiser, seed):
    if isinstance(denoiser, LinearDenoiser):
        side = int(np.sqrt(LINEAR_SIZE))
        return Rng(seed).substream('synthetic').uniform(0.0, 1.0, (1, 1, side, side))
    if block.get('image'):
        return as_image_batch(imageio.read_image(block['image']))
    size = list(Config.SDA_IMAGE_SIZE)
    return DataService.generate_synthetic(1, size, 'strokes', Rng(seed)).clean


def _epsilon_report(rows):
    finished = [r['final_psnr'] for r in rows if r['status'] == 'ok']
    spread = float(max(finished) - min(finished)) if finished else float('nan')
    notes = [f'epsilon={r["epsilon"]:g}: {r["status"]} psnr={r["final_psnr"]}' for r in rows]
    return OracleReport(test='epsilon', estimate=spread, oracle=0.0, samples=len(rows), stderr=0.0,
                        tolerance=EPSILON_SPREAD_DB, tolerance_rule='PSNR spread across epsilon, dB',
                        passed=bool(finished) and spread < EPSILON_SPREAD_DB, informational=True, notes=notes)


def run(args):
    cfg = load_run_config('validate', args)
    block = cfg.get('validate', {})
    suites = block.get('suites') or DEFAULT_SUITES
    seed = seed_of(cfg)
    threads = threads_of(cfg)
    out = start_run('validate', cfg)

    denoiser = _denoiser(block, seed)
    network = getattr(denoiser, 'architecture_tag', None) in ('sda', 'dncnn_lite')
    sigma = block.get('sigma', 25.0) / Config.INTENSITY_SCALE
    x = _clean_image(block, denoiser, seed)
    reports = []

    for suite in suites:
        logger.info('running %s suite', suite)
        if suite == 'divergence':
            eps = block.get('epsilon')
            if eps is None:
                eps = Config.SDA_EPSILON
                if network:
                    eps = RiskService.epsilon_rule(denoiser.architecture_tag, sigma * Config.INTENSITY_SCALE)
            y = NoiseService.corrupt_gaussian(x, sigma, Rng(seed).substream('corrupt')).data
            n_draws = block.get('n_draws', 100 if network else 10000)
            reports.append(OracleService.validate_divergence(denoiser, y, eps, n_draws, seed=seed, threads=threads))
        elif suite == 'unbiasedness':
            reports.append(OracleService.validate_unbiasedness(
                denoiser, x, sigma, block.get('realizations', 2000), eps=block.get('epsilon'),
                seed=seed, threads=threads))
        elif suite == 'pure':
            reports.append(OracleService.validate_pure(
                denoiser, x, block.get('zeta', 0.1), block.get('realizations', 2000),
                eps_dot=block.get('epsilon', Config.PURE_EPSILON), seed=seed, threads=threads))
        elif suite == 'epsilon':
            train = load_dataset(cfg['dataset'], seed) if 'dataset' in cfg else \
                DataService.generate_synthetic(200, Config.SDA_IMAGE_SIZE, 'strokes', Rng(seed))
            test = load_dataset(cfg['test'], seed) if 'test' in cfg else \
                DataService.generate_synthetic(20, Config.SDA_IMAGE_SIZE, 'strokes', Rng(seed + 1))
            training = dict(cfg.get('training', {}))
            training.setdefault('epochs', block.get('epochs', 3))
            training.setdefault('batch_size', min(Config.TRAIN_BATCH_SIZE, len(train)))
            base = TrainConfig(seed=seed, **training)
            rows = OracleService.epsilon_sweep(block.get('arch', 'sda'), sigma,
                                               block.get('eps_grid', [1e-2, 1e-4, 1e-7]), train, test,
                                               cfg=base, seed=seed)
            write_json(out / 'epsilon_sweep.json', rows)
            reports.append(_epsilon_report(rows))

    text = '\n'.join(r.to_text() for r in reports)
    (out / 'report.txt').write_text(text + '\n')
    write_json(out / 'report.json', [r.to_dict() for r in reports])
    print(text)

    failed = [r for r in reports if not r.informational and not r.passed]
    if failed:
        raise ValidationFailure(f'{len(failed)} of {len(reports)} oracle checks failed: '
                                f'{", ".join(r.test for r in failed)}', reports=failed)
    return 0
