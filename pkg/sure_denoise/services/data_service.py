import json
import logging
import math
from pathlib import Path

import numpy as np

from sure_denoise.config import Config
from sure_denoise.exceptions import ConfigError, DataError, ShapeError
from sure_denoise.models import Batch, Dataset, NoiseSpec
from sure_denoise.services.noise_service import NoiseService
from sure_denoise.utils import imageio
from sure_denoise.utils.rng import Rng
from sure_denoise.utils.tensor import Tensor

logger = logging.getLogger(__name__)

SYNTHETIC_KINDS = ('strokes', 'gradients', 'checker')


def _array(a):
    return a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


class DataService:
    @staticmethod
    def load_mnist_idx(images_path, labels_path=None, name='mnist'):
        pixels = imageio.read_idx_images(images_path)
        labels = None
        if labels_path is not None:
            labels = imageio.read_idx_labels(labels_path)
            if len(labels) != len(pixels):
                raise DataError(f'{labels_path}: {len(labels)} labels for {len(pixels)} images')
        clean = pixels.astype(np.float64)[:, None] / 255.0
        logger.info('loaded %d MNIST images from %s', len(clean), images_path)
        return Dataset(name=name, clean=clean, labels=labels)

    @staticmethod
    def split_mnist(ds, train_count=Config.MNIST_TRAIN_COUNT):
        """First ``train_count`` images train, the rest validate."""
        n = len(ds)
        train_count = min(train_count, n)
        train = ds.subset(np.arange(train_count))
        train.name = f'{ds.name}-train'
        if train_count == n:
            return train, None
        validation = ds.subset(np.arange(train_count, n))
        validation.name = f'{ds.name}-validation'
        return train, validation

    @staticmethod
    def select_test_subset(ds, count=Config.MNIST_TEST_COUNT,
                           seed=Config.MNIST_TEST_SEED):
        count = min(count, len(ds))
        picked = np.sort(Rng(seed).substream('subset').permutation(len(ds))[:count])
        out = ds.subset(picked)
        out.name = f'{ds.name}-test{count}'
        return out

    @staticmethod
    def generate_synthetic(n, size, kind, rng, period=8):
        if kind not in SYNTHETIC_KINDS:
            raise ConfigError(f'synthetic kind must be one of: {", ".join(SYNTHETIC_KINDS)}')
        if n < 1:
            raise ConfigError(f'n must be >= 1, got {n}')
        h, w = size
        rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
        images = np.empty((n, 1, h, w))
        for i in range(n):
            sub = rng.substream('synthetic', i)
            if kind == 'checker':
                dy, dx = sub.integers(0, period, 2)
                cells = ((rows + dy) // period + (cols + dx) // period) % 2
                images[i, 0] = np.where(cells == 0, 0.2, 0.8)
            elif kind == 'gradients':
                images[i, 0] = DataService._gradient_image(rows, cols, sub)
            else:
                images[i, 0] = DataService._stroke_image(rows, cols, sub)
        return Dataset(name=f'synthetic-{kind}', clean=images)

    @staticmethod
    def _gradient_image(rows, cols, rng):
        h, w = rows.shape
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * cols / w + np.sin(angle) * rows / h)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(0.2, 0.6) * max(h, w)
        bump = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * radius ** 2))
        img = 0.5 * (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12) + 0.4 * bump
        return np.clip(0.05 + 0.9 * img / max(img.max(), 1e-12), 0.0, 1.0)

    @staticmethod
    def _stroke_image(rows, cols, rng):
        h, w = rows.shape
        img = np.full((h, w), rng.uniform(0.05, 0.25))
        for _ in range(int(rng.integers(3, 7))):
            y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
            y1, x1 = rng.uniform(0, h), rng.uniform(0, w)
            width = rng.uniform(1.0, max(1.5, 0.08 * min(h, w)))
            level = rng.uniform(0.5, 1.0)
            seg = np.array([y1 - y0, x1 - x0])
            length2 = max(float(seg @ seg), 1e-12)
            t = np.clip(((rows - y0) * seg[0] + (cols - x0) * seg[1]) / length2, 0.0, 1.0)
            dist = np.hypot(rows - (y0 + t * seg[0]), cols - (x0 + t * seg[1]))
            # smooth edge so strokes are piecewise smooth rather than aliased
            coverage = np.clip(width - dist + 0.5, 0.0, 1.0)
            img = img * (1 - coverage) + level * coverage
        return np.clip(img, 0.0, 1.0)

    @staticmethod
    def extract_patches(ds, patch, count, rng):
        ph, pw = patch
        _, h, w = ds.image_shape
        if ph > h or pw > w:
            raise ShapeError(f'patch {ph}x{pw} is larger than images {h}x{w}')
        sources = rng.integers(0, len(ds), count)
        tops = rng.integers(0, h - ph + 1, count)
        lefts = rng.integers(0, w - pw + 1, count)

        def crop(stack):
            if stack is None:
                return None
            out = np.empty((count, stack.shape[1], ph, pw))
            for i, (s, t, l) in enumerate(zip(sources, tops, lefts)):
                out[i] = stack[s, :, t:t + ph, l:l + pw]
            return out

        sigma = None if ds.sigma is None else ds.sigma[sources]
        return Dataset(name=f'{ds.name}-patches{ph}x{pw}', clean=crop(ds.clean), noisy=crop(ds.noisy),
                       sigma=sigma, noise=ds.noise)

    @staticmethod
    def epoch_order(n, epoch, rng):
        return rng.substream('shuffle', epoch).permutation(n)

    @staticmethod
    def batches(ds, batch_size, epoch, rng,
                noisy=None):
        """One epoch of shuffled minibatches; the final short batch is kept."""
        n = len(ds)
        if batch_size < 1:
            raise ConfigError(f'batch size must be >= 1, got {batch_size}')
        if batch_size > n:
            raise ConfigError(f'batch size {batch_size} exceeds dataset size {n}')
        noisy = ds.noisy if noisy is None else noisy
        if noisy is None:
            raise DataError(f'dataset {ds.name!r} has no noisy images for this epoch')
        order = DataService.epoch_order(n, epoch, rng)
        for index, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            yield Batch(
                y=noisy[idx],
                x=None if ds.clean is None else ds.clean[idx],
                sigma=None if ds.sigma is None else ds.sigma[idx],
                indices=idx,
                epoch=epoch,
                index=index,
            )

    @staticmethod
    def psnr(a, b, peak=1.0):
        """10 log10(peak^2 / MSE); identical inputs give ``math.inf``."""
        a, b = _array(a), _array(b)
        if a.shape != b.shape:
            raise ShapeError(f'psnr: shapes {a.shape} and {b.shape} differ')
        if not peak > 0:
            raise ConfigError(f'peak must be positive, got {peak}')
        mse = float(np.mean((a - b) ** 2))
        if mse == 0:
            return math.inf
        return 10.0 * math.log10(peak ** 2 / mse)

    @staticmethod
    def mean_psnr(estimates, references, peak=1.0):
        estimates, references = _array(estimates), _array(references)
        values = [DataService.psnr(e, r, peak) for e, r in zip(estimates, references)]
        return float(np.mean(values))

    @staticmethod
    def corrupt_dataset(ds, spec, rng):
        clean = ds.require_clean('corruption')
        noisy, sigma = NoiseService.corrupt(clean, spec, rng)
        return Dataset(name=ds.name, clean=clean, noisy=noisy.data, sigma=sigma, noise=spec, labels=ds.labels)

    @staticmethod
    def load_pgm_dataset(paths, clean_paths=None, name='pgm'):
        def stack(items):
            images = [imageio.read_image(p) for p in items]
            shapes = {img.shape for img in images}
            if len(shapes) != 1:
                raise ShapeError(f'images in {name!r} have different sizes: {sorted(shapes)}')
            return np.stack(images)[:, None]

        noisy = stack(paths) if paths else None
        clean = stack(clean_paths) if clean_paths else None
        return Dataset(name=name, clean=clean, noisy=noisy)

    @staticmethod
    def write_manifest(path, ds, seed, extra=None):
        """Store noisy (and clean, when present) stacks as .npy next to a JSON manifest."""
        path = Path(path)
        base = path.parent
        base.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for key, stack in (('noisy', ds.noisy), ('clean', ds.clean)):
            if stack is not None:
                file_name = f'{path.stem}_{key}.npy'
                imageio.save_array(base / file_name, stack)
                arrays[key] = file_name
        manifest = {
            'name': ds.name,
            'arrays': arrays,
            'noise': None if ds.noise is None else ds.noise.to_dict(),
            'sigma': None if ds.sigma is None else [float(s) for s in ds.sigma],
            'seed': seed,
        }
        manifest.update(extra or {})
        path.write_text(json.dumps(manifest, indent=2))
        return manifest

    @staticmethod
    def load_manifest(path, include_clean=True):
        """Read a manifest listing either .npy stacks (``arrays``) or per-image files (``images``)."""
        path = Path(path)
        if not path.exists():
            raise DataError(f'manifest not found: {path}')
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f'{path}: invalid JSON ({exc})') from None
        base = path.parent
        noise = manifest.get('noise')
        spec = None
        if noise:
            rng = noise.get('sigma_range')
            spec = NoiseSpec(kind=noise['kind'], sigma=noise.get('sigma', 0.0), zeta=noise.get('zeta', 0.0),
                             sigma_range=None if rng is None else tuple(rng))
        if 'arrays' in manifest:
            arrays = manifest['arrays']
            noisy = imageio.load_array(base / arrays['noisy'], 4) if 'noisy' in arrays else None
            clean = None
            if include_clean and 'clean' in arrays:
                clean = imageio.load_array(base / arrays['clean'], 4)
            sigma = manifest.get('sigma')
        elif 'images' in manifest:
            entries = manifest['images']
            noisy = np.stack([imageio.read_image(base / e['noisy']) for e in entries])[:, None]
            clean = None
            if include_clean and all('clean' in e for e in entries):
                clean = np.stack([imageio.read_image(base / e['clean']) for e in entries])[:, None]
            sigmas = [e.get('sigma') for e in entries]
            sigma = sigmas if all(s is not None for s in sigmas) else None
        else:
            raise DataError(f'{path}: manifest needs an "arrays" or "images" section')
        return Dataset(name=manifest.get('name', path.stem), clean=clean, noisy=noisy,
                       sigma=None if sigma is None else np.asarray(sigma, dtype=np.float64), noise=spec)
