"""Helpers shared by the subcommands: config loading, overrides, dataset construction, outputs."""
import copy
import json
import logging
from pathlib import Path

import numpy as np

from sure_denoise.config import Config
from sure_denoise.exceptions import ConfigError
from sure_denoise.models import Dataset, NoiseSpec, RiskObjective, TrainConfig
from sure_denoise.services.data_service import DataService
from sure_denoise.utils.rng import Rng
from sure_denoise.utils.validators import validate_run_config

logger = logging.getLogger(__name__)

# flag dest -> dotted config path, per command
OVERRIDES = {
    'corrupt': {'sigma': 'noise.sigma', 'zeta': 'noise.zeta'},
    'train': {'epochs': 'training.epochs', 'sigma': 'noise.sigma', 'objective': 'objective.kind',
              'lr': 'training.lr', 'batch_size': 'training.batch_size', 'epsilon': 'objective.epsilon',
              'weight_decay': 'training.weight_decay', 'arch': 'architecture.tag'},
    'refine': {'epochs': 'refine.epochs', 'sigma': 'refine.sigma', 'lr': 'refine.lr',
               'epsilon': 'refine.epsilon', 'checkpoint': 'refine.checkpoint', 'image': 'refine.image',
               'gt': 'refine.gt'},
    'denoise': {'checkpoint': 'denoise.checkpoint', 'images': 'denoise.images', 'gt': 'denoise.gt'},
    'validate': {'epochs': 'validate.epochs', 'sigma': 'validate.sigma', 'epsilon': 'validate.epsilon',
                 'arch': 'validate.arch', 'checkpoint': 'validate.checkpoint', 'image': 'validate.image',
                 'zeta': 'validate.zeta', 'n_draws': 'validate.n_draws',
                 'realizations': 'validate.realizations', 'suites': 'validate.suites'},
}
SHARED_OVERRIDES = {'seed': 'seed', 'output_dir': 'output_dir', 'threads': 'threads'}


def _set_path(document, dotted, value):
    node = document
    *parents, leaf = dotted.split('.')
    for key in parents:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f'{dotted}: cannot override inside a non-object field')
    node[leaf] = value


def read_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f'config file not found: {path}')
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f'{path}: invalid JSON ({exc})') from None
    if not isinstance(document, dict):
        raise ConfigError(f'{path}: the top level must be an object')
    return document


def load_run_config(command, args):
    """Read ``--config``, apply flag overrides one-to-one, then validate the result strictly."""
    document = read_config(args.config) if getattr(args, 'config', None) else {}
    document = copy.deepcopy(document)
    mapping = {**SHARED_OVERRIDES, **OVERRIDES.get(command, {})}
    for dest, dotted in mapping.items():
        value = getattr(args, dest, None)
        if value is not None and value != []:
            _set_path(document, dotted, value)
    if getattr(args, 'no_keep_best', False):
        _set_path(document, 'refine.keep_best', False)
    if getattr(args, 'log_level', None):
        document['log_level'] = args.log_level
    ok, error = validate_run_config(command, document)
    if not ok:
        raise ConfigError(f'invalid {command} config: {error}')
    return document


def seed_of(cfg):
    return int(cfg.get('seed', Config.DEFAULT_SEED))


def threads_of(cfg):
    return int(cfg.get('threads', Config.THREADS))


def output_dir(cfg, command):
    out = Path(cfg.get('output_dir') or f'runs/{command}')
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path, payload):
    path.write_text(json.dumps(payload, indent=2, default=_json_default))
    return path


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f'{type(value).__name__} is not JSON serializable')


def start_run(command, cfg):
    out = output_dir(cfg, command)
    write_json(out / 'config.json', cfg)
    logger.info('%s: writing outputs to %s', command, out)
    return out


def noise_from_block(block):
    """Noise blocks give sigma on the 0-255 scale and zeta in [0, 1] units."""
    if block is None:
        return None
    rng = block.get('sigma_range')
    return NoiseSpec.from_255(kind=block['kind'], sigma=block.get('sigma', 0.0), zeta=block.get('zeta', 0.0),
                              sigma_range=None if rng is None else tuple(rng))


def load_dataset(block, seed):
    kind = block['kind']
    if kind == 'mnist':
        ds = DataService.load_mnist_idx(block['images'], block.get('labels'))
        split = block.get('split', 'all')
        if split in ('train', 'validation'):
            train, validation = DataService.split_mnist(ds)
            ds = train if split == 'train' else validation
            if ds is None:
                raise ConfigError(f'{block["images"]} has no images left for a validation split')
        elif split == 'test':
            ds = DataService.select_test_subset(ds)
    elif kind == 'synthetic':
        ds = DataService.generate_synthetic(block['n'], tuple(block['size']), block['pattern'], Rng(seed))
    elif kind == 'pgm':
        ds = DataService.load_pgm_dataset(block['paths'], block.get('clean_paths'))
    else:
        ds = DataService.load_manifest(block['path'], include_clean=block.get('ground_truth', True))
    if 'limit' in block:
        ds = ds.subset(np.arange(min(block['limit'], len(ds))))
    if 'patch' in block:
        count = block.get('patch_count', len(ds))
        ds = DataService.extract_patches(ds, tuple(block['patch']), count, Rng(seed).substream('patches'))
    if block.get('ground_truth') is False and ds.has_clean:
        ds = ds.without_clean()
    logger.info('dataset %s: %d images of shape %s (clean images %s)', ds.name, len(ds), ds.image_shape,
                'present' if ds.has_clean else 'absent')
    return ds


def train_config_from(cfg, noise):
    objective = cfg['objective']
    training = dict(cfg.get('training', {}))
    return TrainConfig(objective=RiskObjective(objective['kind'], objective.get('epsilon')),
                       noise=noise, seed=seed_of(cfg), **training)


def as_image_batch(image):
    if image.ndim == 2:
        return image[None, None]
    if image.ndim == 3:
        return image[None]
    return image
