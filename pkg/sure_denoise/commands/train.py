import logging
import time

from sure_denoise.commands.common import (
    load_dataset,
    load_run_config,
    noise_from_block,
    seed_of,
    start_run,
    train_config_from,
    write_json,
)
from sure_denoise.exceptions import TrainingAborted
from sure_denoise.models import OBJECTIVE_KINDS
from sure_denoise.services.checkpoint_service import CheckpointService
from sure_denoise.services.network_service import build_denoiser
from sure_denoise.services.training_service import TrainingService
from sure_denoise.utils.rng import Rng

logger = logging.getLogger(__name__)


def register(subparsers, common):
    parser = subparsers.add_parser('train', parents=[common], help='train a denoiser')
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--sigma', type=float, help='gaussian noise level on the 0-255 scale')
    parser.add_argument('--objective', choices=OBJECTIVE_KINDS)
    parser.add_argument('--arch', choices=['sda', 'dncnn_lite'])
    parser.add_argument('--lr', type=float)
    parser.add_argument('--batch-size', type=int)
    parser.add_argument('--epsilon', type=float, help='probe step (overrides the architecture rule)')
    parser.add_argument('--weight-decay', type=float)
    parser.set_defaults(handler=run)


def run(args):
    cfg = load_run_config('train', args)
    seed = seed_of(cfg)
    out = start_run('train', cfg)
    started = time.perf_counter()

    ds = load_dataset(cfg['dataset'], seed)
    validation = load_dataset(cfg['validation'], seed) if 'validation' in cfg else None
    noise = noise_from_block(cfg.get('noise')) or ds.noise
    train_cfg = train_config_from(cfg, noise)
    if train_cfg.objective.needs_ground_truth:
        ds.require_clean('the mse_gt objective')

    architecture = dict(cfg['architecture'])
    architecture.setdefault('in_channels', ds.channels)
    denoiser = build_denoiser(architecture, rng=Rng(seed).substream('init'))

    try:
        result = TrainingService.train(denoiser, ds, train_cfg, validation=validation,
                                       log_path=out / 'train_log.csv', output_dir=out)
    except TrainingAborted as exc:
        if exc.last_good is not None:
            CheckpointService.save_checkpoint(out / 'checkpoint_last_good.sure', exc.last_good)
            logger.error('saved the last good checkpoint (epoch %d)', exc.last_good.epoch)
        raise

    CheckpointService.save_checkpoint(out / 'checkpoint.sure', result.checkpoint)
    final = result.history[-1] if result.history else None
    write_json(out / 'summary.json', {
        'command': 'train',
        'architecture': denoiser.architecture_tag,
        'objective': train_cfg.objective.kind,
        'epochs_run': len(result.history),
        'stopped_early': result.stopped_early,
        'final_loss': None if final is None else final.loss,
        'final_val_psnr': None if final is None else final.val_psnr,
        'wall_seconds': time.perf_counter() - started,
        'seed': seed,
        'checkpoint': str(out / 'checkpoint.sure'),
    })
    return 0
