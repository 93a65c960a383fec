import gzip
import math
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from sure_denoise.exceptions import (
    ConfigError,
    DataError,
    GroundTruthUnavailableError,
    IdxDimensionError,
    IdxFormatError,
    IdxTruncatedError,
    PgmFormatError,
    ShapeError,
)
from sure_denoise.models import Dataset, NoiseSpec
from sure_denoise.services.data_service import DataService
from sure_denoise.utils import imageio
from sure_denoise.utils.rng import Rng


def _write_labels(path, labels):
    with open(path, 'wb') as handle:
        handle.write(struct.pack('>II', 0x00000801, len(labels)))
        handle.write(bytes(labels))


def _idx_images(count=5, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (count, 28, 28), dtype=np.uint8)


def test_load_mnist_idx(tmp_path):
    pixels = _idx_images()
    imageio.write_idx_images(tmp_path / 'images.idx', pixels)
    _write_labels(tmp_path / 'labels.idx', [1, 2, 3, 4, 5])
    ds = DataService.load_mnist_idx(tmp_path / 'images.idx', tmp_path / 'labels.idx')
    assert ds.clean.shape == (5, 1, 28, 28)
    assert np.allclose(ds.clean[:, 0] * 255.0, pixels)
    assert list(ds.labels) == [1, 2, 3, 4, 5]
    assert ds.noisy is None


def test_load_gzipped_idx(tmp_path):
    pixels = _idx_images(2)
    imageio.write_idx_images(tmp_path / 'images.idx', pixels)
    with open(tmp_path / 'images.idx', 'rb') as src, gzip.open(tmp_path / 'images.idx.gz', 'wb') as dst:
        dst.write(src.read())
    ds = DataService.load_mnist_idx(tmp_path / 'images.idx.gz')
    assert len(ds) == 2


def test_idx_bad_magic(tmp_path):
    (tmp_path / 'bad.idx').write_bytes(struct.pack('>IIII', 0x00000801, 1, 28, 28) + bytes(784))
    with pytest.raises(IdxFormatError):
        imageio.read_idx_images(tmp_path / 'bad.idx')


def test_idx_truncated(tmp_path):
    (tmp_path / 'short.idx').write_bytes(struct.pack('>IIII', 0x00000803, 2, 28, 28) + bytes(784))
    with pytest.raises(IdxTruncatedError):
        imageio.read_idx_images(tmp_path / 'short.idx')


def test_idx_wrong_dimensions(tmp_path):
    (tmp_path / 'big.idx').write_bytes(struct.pack('>IIII', 0x00000803, 1, 32, 32) + bytes(1024))
    with pytest.raises(IdxDimensionError):
        imageio.read_idx_images(tmp_path / 'big.idx')


def test_label_count_mismatch(tmp_path):
    imageio.write_idx_images(tmp_path / 'images.idx', _idx_images(3))
    _write_labels(tmp_path / 'labels.idx', [1, 2])
    with pytest.raises(DataError):
        DataService.load_mnist_idx(tmp_path / 'images.idx', tmp_path / 'labels.idx')


def test_missing_file():
    with pytest.raises(DataError):
        imageio.read_idx_images('/nonexistent/images.idx')


def test_split_and_subset():
    ds = Dataset(name='digits', clean=np.random.default_rng(0).uniform(size=(30, 1, 28, 28)))
    train, validation = DataService.split_mnist(ds, train_count=20)
    assert len(train) == 20 and len(validation) == 10
    assert np.array_equal(validation.clean[0], ds.clean[20])
    train, validation = DataService.split_mnist(ds, train_count=40)
    assert len(train) == 30 and validation is None

    first = DataService.select_test_subset(ds, count=7)
    second = DataService.select_test_subset(ds, count=7)
    assert np.array_equal(first.clean, second.clean)
    assert len(first) == 7


@pytest.mark.parametrize('kind', ['strokes', 'gradients', 'checker'])
def test_synthetic_images_in_range(kind):
    ds = DataService.generate_synthetic(4, (16, 20), kind, Rng(0))
    assert ds.clean.shape == (4, 1, 16, 20)
    assert ds.clean.min() >= 0.0 and ds.clean.max() <= 1.0
    again = DataService.generate_synthetic(4, (16, 20), kind, Rng(0))
    assert np.array_equal(ds.clean, again.clean)


def test_checker_values():
    ds = DataService.generate_synthetic(3, (16, 16), 'checker', Rng(1))
    assert set(np.unique(ds.clean)) == {0.2, 0.8}


def test_synthetic_rejects():
    with pytest.raises(ConfigError):
        DataService.generate_synthetic(2, (8, 8), 'noise', Rng(0))
    with pytest.raises(ConfigError):
        DataService.generate_synthetic(0, (8, 8), 'strokes', Rng(0))


def test_patches_crop_clean_and_noisy_together(noisy_strokes):
    patches = DataService.extract_patches(noisy_strokes, (8, 8), 20, Rng(2))
    assert patches.clean.shape == (20, 1, 8, 8)
    residual = patches.noisy - patches.clean
    full = noisy_strokes.noisy - noisy_strokes.clean
    # every noisy crop sits on top of the matching clean crop
    assert np.abs(residual).max() <= np.abs(full).max()
    with pytest.raises(ShapeError):
        DataService.extract_patches(noisy_strokes, (40, 8), 2, Rng(2))


@settings(max_examples=20, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(batch_size=st.integers(1, 12), epoch=st.integers(0, 5))
def test_batches_cover_every_image_once(noisy_strokes, batch_size, epoch):
    seen = []
    batches = list(DataService.batches(noisy_strokes, batch_size, epoch, Rng(3)))
    for batch in batches:
        assert len(batch) <= batch_size
        assert np.array_equal(batch.y, noisy_strokes.noisy[batch.indices])
        seen.extend(batch.indices.tolist())
    assert sorted(seen) == list(range(12))
    assert len(batches) == math.ceil(12 / batch_size)


def test_batch_order_depends_on_epoch(noisy_strokes):
    first = next(DataService.batches(noisy_strokes, 12, 0, Rng(3))).indices
    again = next(DataService.batches(noisy_strokes, 12, 0, Rng(3))).indices
    later = next(DataService.batches(noisy_strokes, 12, 1, Rng(3))).indices
    assert np.array_equal(first, again)
    assert not np.array_equal(first, later)


def test_batch_size_too_large(noisy_strokes):
    with pytest.raises(ConfigError):
        list(DataService.batches(noisy_strokes, 13, 0, Rng(0)))


def test_gt_free_batches_have_no_clean(noisy_strokes):
    batch = next(DataService.batches(noisy_strokes.without_clean(), 4, 0, Rng(0)))
    assert batch.x is None


def test_psnr():
    a = np.zeros((4, 4))
    assert DataService.psnr(a, a) == math.inf
    b = np.full((4, 4), 0.1)
    assert DataService.psnr(a, b) == pytest.approx(20.0)
    assert DataService.psnr(a, b) == DataService.psnr(b, a)
    with pytest.raises(ShapeError):
        DataService.psnr(a, np.zeros((4, 5)))


def test_mean_psnr_is_per_image():
    clean = np.zeros((2, 1, 4, 4))
    est = np.stack([np.full((1, 4, 4), 0.1), np.full((1, 4, 4), 0.01)])
    assert DataService.mean_psnr(est, clean) == pytest.approx(30.0)


def test_corrupt_dataset(strokes):
    ds = DataService.corrupt_dataset(strokes, NoiseSpec.from_255(sigma=25.0), Rng(0))
    assert ds.noisy.shape == strokes.clean.shape
    assert np.allclose(ds.sigma, 25.0 / 255.0)
    with pytest.raises(GroundTruthUnavailableError):
        DataService.corrupt_dataset(ds.without_clean(), ds.noise, Rng(0))


def test_pgm_round_trip(tmp_path):
    image = np.array([[0.0, 0.5], [1.0, 0.25]])
    imageio.write_pgm(tmp_path / 'img.pgm', image)
    raw = (tmp_path / 'img.pgm').read_bytes()
    assert raw.startswith(b'P5\n2 2\n255\n')
    assert list(raw[-4:]) == [0, 128, 255, 64]
    back = imageio.read_pgm(tmp_path / 'img.pgm')
    assert np.allclose(back, np.array([[0, 128], [255, 64]]) / 255.0)


def test_pgm_clamps_out_of_range(tmp_path):
    imageio.write_pgm(tmp_path / 'img.pgm', np.array([[-0.3, 1.7]]))
    assert list((tmp_path / 'img.pgm').read_bytes()[-2:]) == [0, 255]


def test_pgm_header_comments(tmp_path):
    (tmp_path / 'c.pgm').write_bytes(b'P5\n# made by hand\n2 1\n255\n\x00\xff')
    assert np.allclose(imageio.read_pgm(tmp_path / 'c.pgm'), [[0.0, 1.0]])


@pytest.mark.parametrize('content', [
    b'P5\n2 1\n65535\n\x00\x00\x00\x00',
    b'P2\n2 1\n255\n0 255',
    b'P5\n2 2\n255\n\x00',
])
def test_pgm_rejects(tmp_path, content):
    (tmp_path / 'bad.pgm').write_bytes(content)
    with pytest.raises(PgmFormatError):
        imageio.read_pgm(tmp_path / 'bad.pgm')


def test_pgm_dataset_sizes_must_match(tmp_path):
    imageio.write_pgm(tmp_path / 'a.pgm', np.zeros((4, 4)))
    imageio.write_pgm(tmp_path / 'b.pgm', np.zeros((4, 5)))
    with pytest.raises(ShapeError):
        DataService.load_pgm_dataset([tmp_path / 'a.pgm', tmp_path / 'b.pgm'])
    ds = DataService.load_pgm_dataset([tmp_path / 'a.pgm'], [tmp_path / 'a.pgm'])
    assert ds.noisy.shape == (1, 1, 4, 4) and ds.has_clean


def test_manifest_round_trip(tmp_path, noisy_strokes):
    manifest = DataService.write_manifest(tmp_path / 'noisy.json', noisy_strokes, seed=5)
    assert manifest['seed'] == 5
    loaded = DataService.load_manifest(tmp_path / 'noisy.json')
    assert np.array_equal(loaded.noisy, noisy_strokes.noisy)
    assert np.array_equal(loaded.clean, noisy_strokes.clean)
    assert loaded.noise == noisy_strokes.noise
    assert np.allclose(loaded.sigma, noisy_strokes.sigma)
    blind = DataService.load_manifest(tmp_path / 'noisy.json', include_clean=False)
    assert not blind.has_clean


def test_manifest_image_list(tmp_path):
    imageio.write_pgm(tmp_path / 'n0.pgm', np.full((3, 3), 0.4))
    imageio.write_pgm(tmp_path / 'c0.pgm', np.full((3, 3), 0.5))
    (tmp_path / 'list.json').write_text(
        '{"images": [{"noisy": "n0.pgm", "clean": "c0.pgm", "sigma": 0.1}]}')
    ds = DataService.load_manifest(tmp_path / 'list.json')
    assert ds.noisy.shape == (1, 1, 3, 3)
    assert ds.has_clean
    assert np.allclose(ds.sigma, [0.1])


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError):
        DataService.load_manifest(tmp_path / 'missing.json')
    (tmp_path / 'broken.json').write_text('{')
    with pytest.raises(DataError):
        DataService.load_manifest(tmp_path / 'broken.json')
    (tmp_path / 'empty.json').write_text('{}')
    with pytest.raises(DataError):
        DataService.load_manifest(tmp_path / 'empty.json')


def test_dataset_shape_checks():
    with pytest.raises(ShapeError):
        Dataset(name='x')
    with pytest.raises(ShapeError):
        Dataset(name='x', clean=np.zeros((2, 1, 4, 4)), noisy=np.zeros((2, 1, 4, 5)))
    with pytest.raises(ShapeError):
        Dataset(name='x', clean=np.zeros((4, 4)))
