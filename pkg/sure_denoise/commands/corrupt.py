import logging

from sure_denoise.commands.common import (
    load_dataset,
    load_run_config,
    noise_from_block,
    seed_of,
    start_run,
    write_json,
)
from sure_denoise.services.data_service import DataService
from sure_denoise.utils import imageio
from sure_denoise.utils.rng import Rng

logger = logging.getLogger(__name__)

PREVIEW_COUNT = 16


def register(subparsers, common):
    parser = subparsers.add_parser('corrupt', parents=[common], help='write a noisy copy of a dataset')
    parser.add_argument('--sigma', type=float, help='gaussian noise level on the 0-255 scale')
    parser.add_argument('--zeta', type=float, help='poisson gain')
    parser.set_defaults(handler=run)


def run(args):
    cfg = load_run_config('corrupt', args)
    seed = seed_of(cfg)
    out = start_run('corrupt', cfg)
    ds = load_dataset(cfg['dataset'], seed)
    spec = noise_from_block(cfg['noise'])
    noisy = DataService.corrupt_dataset(ds, spec, Rng(seed))
    manifest = DataService.write_manifest(out / 'noisy.json', noisy, seed)

    if cfg.get('previews'):
        preview_dir = out / 'previews'
        preview_dir.mkdir(exist_ok=True)
        for i in range(min(PREVIEW_COUNT, len(noisy))):
            imageio.write_pgm(preview_dir / f'noisy_{i:05d}.pgm', noisy.noisy[i])

    write_json(out / 'summary.json', {
        'command': 'corrupt',
        'images': len(noisy),
        'noise': manifest['noise'],
        'seed': seed,
        'manifest': str(out / 'noisy.json'),
    })
    logger.info('wrote %d noisy images (%s)', len(noisy), spec.kind)
    return 0
