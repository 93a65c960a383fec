import logging

import numpy as np

from sure_denoise.commands.common import as_image_batch, load_run_config, seed_of, start_run, write_json
from sure_denoise.config import Config
from sure_denoise.exceptions import ShapeError
from sure_denoise.services.checkpoint_service import CheckpointService
from sure_denoise.services.data_service import DataService
from sure_denoise.services.training_service import TrainingService
from sure_denoise.utils import imageio
from sure_denoise.utils.tensor import no_grad

logger = logging.getLogger(__name__)


def register(subparsers, common):
    parser = subparsers.add_parser('refine', parents=[common],
                                   help='fine-tune a checkpoint on one noisy image by minimizing its SURE')
    parser.add_argument('--checkpoint')
    parser.add_argument('--image', help='noisy image (PGM or .npy)')
    parser.add_argument('--sigma', type=float, help='noise level on the 0-255 scale')
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--lr', type=float)
    parser.add_argument('--epsilon', type=float)
    parser.add_argument('--gt', help='clean image, used only to report PSNR')
    parser.add_argument('--no-keep-best', action='store_true', help='return the final epoch instead of the best')
    parser.set_defaults(handler=run)


def run(args):
    cfg = load_run_config('refine', args)
    block = cfg['refine']
    seed = seed_of(cfg)
    out = start_run('refine', cfg)

    ckpt = CheckpointService.load_checkpoint(block['checkpoint'])
    image = imageio.read_image(block['image'])
    y = as_image_batch(image)
    sigma = block['sigma'] / Config.INTENSITY_SCALE

    result = TrainingService.refine(
        ckpt, y, sigma,
        epochs=block.get('epochs', Config.REFINE_EPOCHS),
        lr=block.get('lr', Config.REFINE_LR),
        lr_decay_epoch=block.get('lr_decay_epoch', Config.REFINE_LR_DECAY_EPOCH),
        lr_decayed=block.get('lr_decayed', Config.REFINE_LR_DECAYED),
        eps=block.get('epsilon'),
        seed=seed,
        keep_best=block.get('keep_best', True),
        log_path=out / 'refine_log.csv',
    )

    CheckpointService.save_checkpoint(out / 'refined.sure', result.checkpoint)
    denoised = result.denoised.reshape(image.shape)
    imageio.save_array(out / 'denoised.npy', denoised)
    if denoised.ndim == 2 or denoised.shape[0] == 1:
        imageio.write_pgm(out / 'denoised.pgm', denoised)

    summary = {
        'command': 'refine',
        'sure_before': result.sure_before,
        'sure_after': result.sure_after,
        'best_epoch': result.best_epoch,
        'seed': seed,
    }
    print(f'SURE before: {result.sure_before:.6f}')
    print(f'SURE after:  {result.sure_after:.6f}')
    if block.get('gt'):
        gt = imageio.read_image(block['gt'])
        if gt.shape != image.shape:
            raise ShapeError(f'ground truth {gt.shape} does not match the noisy image {image.shape}')
        pretrained = CheckpointService.to_denoiser(ckpt)
        with no_grad():
            before = pretrained(y, 'eval').data.reshape(image.shape)
        summary['psnr_before'] = DataService.psnr(before, gt)
        summary['psnr_after'] = DataService.psnr(denoised, gt)
        print(f'PSNR before: {summary["psnr_before"]:.3f} dB')
        print(f'PSNR after:  {summary["psnr_after"]:.3f} dB')
    write_json(out / 'summary.json', summary)
    return 0
