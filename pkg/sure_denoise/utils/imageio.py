"""File formats: MNIST IDX, binary PGM (P5, maxval 255) and float arrays."""
import gzip
import logging
import struct
from pathlib import Path

import numpy as np

from sure_denoise.config import Config
from sure_denoise.exceptions import (
    DataError,
    IdxDimensionError,
    IdxFormatError,
    IdxTruncatedError,
    PgmFormatError,
)

logger = logging.getLogger(__name__)


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f'file not found: {path}')
    opener = gzip.open if path.suffix == '.gz' else open
    with opener(path, 'rb') as handle:
        return handle.read()


def read_idx_images(path):
    # [offset] [type]          [value]          [description]
    # 0000     32 bit integer  0x00000803(2051) magic number (MSB first)
    # 0004     32 bit integer  N                number of images
    # 0008     32 bit integer  28               number of rows
    # 0012     32 bit integer  28               number of columns
    # 0016     unsigned byte   ??               pixels, row-major
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxTruncatedError(f'{path}: file shorter than the IDX magic number')
    (magic,) = struct.unpack('>I', raw[:4])
    if magic != Config.MNIST_IMAGE_MAGIC:
        raise IdxFormatError(f'{path}: bad IDX magic 0x{magic:08x}, expected 0x{Config.MNIST_IMAGE_MAGIC:08x}')
    if len(raw) < 16:
        raise IdxTruncatedError(f'{path}: header truncated')
    count, rows, cols = struct.unpack('>III', raw[4:16])
    if (rows, cols) != Config.SDA_IMAGE_SIZE:
        raise IdxDimensionError(f'{path}: images are {rows}x{cols}, expected 28x28')
    expected = count * rows * cols
    if len(raw) - 16 < expected:
        raise IdxTruncatedError(f'{path}: expected {expected} pixel bytes, found {len(raw) - 16}')
    pixels = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=16)
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path):
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise IdxTruncatedError(f'{path}: header truncated')
    magic, count = struct.unpack('>II', raw[:8])
    if magic != Config.MNIST_LABEL_MAGIC:
        raise IdxFormatError(f'{path}: bad IDX magic 0x{magic:08x}, expected 0x{Config.MNIST_LABEL_MAGIC:08x}')
    if len(raw) - 8 < count:
        raise IdxTruncatedError(f'{path}: expected {count} labels, found {len(raw) - 8}')
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).copy()


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(path, 'wb') as handle:
        handle.write(struct.pack('>IIII', Config.MNIST_IMAGE_MAGIC, count, rows, cols))
        handle.write(images.tobytes())


def _next_token(raw, pos):
    n = len(raw)
    while pos < n:
        ch = raw[pos:pos + 1]
        if ch == b'#':
            while pos < n and raw[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not raw[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PgmFormatError('PGM header ended early')
    return raw[start:pos], pos


def read_pgm(path):
    """Read a P5 PGM with maxval 255 into a (H, W) float array in [0, 1]."""
    raw = _read_bytes(path)
    magic, pos = _next_token(raw, 0)
    if magic != b'P5':
        raise PgmFormatError(f'{path}: unsupported PGM magic {magic!r}, only P5 is read')
    try:
        width_tok, pos = _next_token(raw, pos)
        height_tok, pos = _next_token(raw, pos)
        maxval_tok, pos = _next_token(raw, pos)
        width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    except ValueError:
        raise PgmFormatError(f'{path}: malformed PGM header') from None
    if maxval != 255:
        raise PgmFormatError(f'{path}: maxval {maxval} unsupported, only 255 is read')
    if width <= 0 or height <= 0:
        raise PgmFormatError(f'{path}: invalid dimensions {width}x{height}')
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    if len(raw) - pos < width * height:
        raise PgmFormatError(f'{path}: raster truncated, expected {width * height} bytes')
    pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width).astype(np.float64) / 255.0


def quantize(image):
    """Clamp to [0, 1] and map to bytes, rounding halves up."""
    clipped = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, image):
    image = np.asarray(image)
    image = np.squeeze(image)
    if image.ndim != 2:
        raise PgmFormatError(f'write_pgm expects a single-channel image, got shape {image.shape}')
    height, width = image.shape
    with open(path, 'wb') as handle:
        handle.write(f'P5\n{width} {height}\n255\n'.encode('ascii'))
        handle.write(quantize(image).tobytes())


def read_image(path):
    path = Path(path)
    if path.suffix == '.npy':
        return load_array(path)
    return read_pgm(path)


def save_array(path, array):
    np.save(path, np.asarray(array, dtype=np.float64), allow_pickle=False)


def load_array(path, expected_ndim=None):
    path = Path(path)
    if not path.exists():
        raise DataError(f'file not found: {path}')
    try:
        array = np.load(path, allow_pickle=False)
    except ValueError as exc:
        raise DataError(f'{path}: unreadable array file ({exc})') from None
    if expected_ndim is not None and array.ndim != expected_ndim:
        raise DataError(f'{path}: expected {expected_ndim} dimensions, found shape {array.shape}')
    return array.astype(np.float64)
