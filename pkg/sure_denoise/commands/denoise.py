import logging
from pathlib import Path

from sure_denoise.commands.common import as_image_batch, load_run_config, start_run, write_json
from sure_denoise.exceptions import ConfigError, ShapeError
from sure_denoise.services.checkpoint_service import CheckpointService
from sure_denoise.services.data_service import DataService
from sure_denoise.utils import imageio
from sure_denoise.utils.tensor import no_grad

logger = logging.getLogger(__name__)


def register(subparsers, common):
    parser = subparsers.add_parser('denoise', parents=[common], help='run a checkpoint on noisy images')
    parser.add_argument('--checkpoint')
    parser.add_argument('--images', nargs='+', help='noisy images (PGM or .npy)')
    parser.add_argument('--gt', nargs='+', help='clean images in the same order, for PSNR')
    parser.set_defaults(handler=run)


def run(args):
    cfg = load_run_config('denoise', args)
    block = cfg['denoise']
    out = start_run('denoise', cfg)
    denoiser = CheckpointService.to_denoiser(CheckpointService.load_checkpoint(block['checkpoint']))
    gts = block.get('gt')
    if gts is not None and len(gts) != len(block['images']):
        raise ConfigError(f'denoise.gt: {len(gts)} ground-truth images for {len(block["images"])} inputs')

    results = []
    for i, path in enumerate(block['images']):
        image = imageio.read_image(path)
        with no_grad():
            output = denoiser(as_image_batch(image), 'eval').data.reshape(image.shape)
        stem = Path(path).stem
        target = out / f'{stem}_denoised.npy'
        imageio.save_array(target, output)
        if output.ndim == 2:
            target = out / f'{stem}_denoised.pgm'
            imageio.write_pgm(target, output)
        entry = {'image': path, 'output': str(target)}
        if gts is not None:
            gt = imageio.read_image(gts[i])
            if gt.shape != image.shape:
                raise ShapeError(f'{gts[i]}: ground truth {gt.shape} does not match {image.shape}')
            entry['psnr'] = DataService.psnr(output, gt)
            print(f'{path}: PSNR {entry["psnr"]:.3f} dB')
        results.append(entry)
        logger.info('denoised %s', path)

    write_json(out / 'summary.json', {'command': 'denoise', 'images': results})
    return 0
