"""Checkpoint persistence.

File layout: the magic bytes, a little-endian uint32 header length, a UTF-8 JSON
header (version, architecture, tensor entries with name/shape/dtype, optimizer
metadata, seed, epoch, parameter mask) and then the raw little-endian float64
payload of every entry in header order.
"""
import json
import logging
import struct
from pathlib import Path

import numpy as np

from sure_denoise.config import Config
from sure_denoise.exceptions import (
    ArchitectureMismatchError,
    CheckpointVersionError,
    CorruptCheckpointError,
    DataError,
)
from sure_denoise.models import Checkpoint
from sure_denoise.services.network_service import Denoiser, build_denoiser

logger = logging.getLogger(__name__)

_DTYPE = '<f8'
_LENGTH = struct.Struct('<I')
_OPTIM_PREFIX = 'optim.'


def _check_header(path, header):
    if not isinstance(header, dict):
        raise CorruptCheckpointError(f'{path}: header is {type(header).__name__}, expected an object')
    if not isinstance(header.get('architecture'), dict):
        raise CorruptCheckpointError(f'{path}: header has no architecture object')
    entries = header.get('entries', [])
    if not isinstance(entries, list):
        raise CorruptCheckpointError(f'{path}: header entries must be a list')
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or not isinstance(entry.get('name'), str):
            raise CorruptCheckpointError(f'{path}: entry {i} has no name')
        shape = entry.get('shape')
        if not isinstance(shape, list) or not all(isinstance(n, int) and n >= 0 for n in shape):
            raise CorruptCheckpointError(f'{path}: entry {entry["name"]} has an invalid shape {shape!r}')
    if header.get('optimizer') is not None and not isinstance(header['optimizer'], dict):
        raise CorruptCheckpointError(f'{path}: optimizer metadata must be an object')


def _optimizer_tensors(optimizer):
    if not optimizer:
        return {}
    out = {}
    for moment in ('m', 'v'):
        for name, arr in (optimizer.get(moment) or {}).items():
            out[f'{_OPTIM_PREFIX}{moment}.{name}'] = arr
    return out


class CheckpointService:
    @staticmethod
    def checkpoint_from(denoiser, optimizer=None, seed=0, epoch=0):
        return Checkpoint(
            architecture=denoiser.architecture(),
            tensors=denoiser.state_dict(),
            param_mask=list(denoiser.param_mask),
            optimizer=None if optimizer is None else optimizer.state_dict(),
            seed=seed,
            epoch=epoch,
        )

    @staticmethod
    def save_checkpoint(path, ckpt):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = dict(ckpt.tensors)
        tensors.update(_optimizer_tensors(ckpt.optimizer))
        optimizer_meta = None
        if ckpt.optimizer:
            optimizer_meta = {k: v for k, v in ckpt.optimizer.items() if k not in ('m', 'v')}
        entries = [{'name': name, 'shape': list(arr.shape), 'dtype': _DTYPE} for name, arr in tensors.items()]
        header = {
            'version': ckpt.version,
            'architecture': ckpt.architecture,
            'entries': entries,
            'optimizer': optimizer_meta,
            'param_mask': ckpt.param_mask,
            'seed': int(ckpt.seed),
            'epoch': int(ckpt.epoch),
        }
        raw_header = json.dumps(header, sort_keys=True).encode('utf-8')
        with open(path, 'wb') as handle:
            handle.write(Config.CHECKPOINT_MAGIC)
            handle.write(_LENGTH.pack(len(raw_header)))
            handle.write(raw_header)
            for entry in entries:
                handle.write(np.ascontiguousarray(tensors[entry['name']], dtype=_DTYPE).tobytes())
        logger.debug('saved checkpoint %s (%d tensors, epoch %d)', path, len(entries), ckpt.epoch)
        return path

    @staticmethod
    def load_checkpoint(path):
        path = Path(path)
        if not path.exists():
            raise DataError(f'checkpoint not found: {path}')
        raw = path.read_bytes()
        magic = Config.CHECKPOINT_MAGIC
        if raw[:len(magic)] != magic:
            raise CorruptCheckpointError(f'{path}: not a checkpoint file (bad magic)')
        offset = len(magic)
        if len(raw) < offset + _LENGTH.size:
            raise CorruptCheckpointError(f'{path}: truncated before header length')
        (header_len,) = _LENGTH.unpack_from(raw, offset)
        offset += _LENGTH.size
        if len(raw) < offset + header_len:
            raise CorruptCheckpointError(f'{path}: truncated header')
        try:
            header = json.loads(raw[offset:offset + header_len].decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpointError(f'{path}: unreadable header ({exc})') from None
        _check_header(path, header)
        offset += header_len

        version = header.get('version')
        if version != Config.CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f'{path}: checkpoint version {version} is not supported (expected {Config.CHECKPOINT_VERSION})')

        tensors = {}
        for entry in header.get('entries', []):
            if entry.get('dtype') != _DTYPE:
                raise CorruptCheckpointError(f'{path}: unsupported dtype {entry.get("dtype")!r} for {entry["name"]}')
            shape = tuple(entry['shape'])
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8
            if len(raw) < offset + nbytes:
                raise CorruptCheckpointError(f'{path}: truncated payload for {entry["name"]}')
            tensors[entry['name']] = np.frombuffer(raw, dtype=_DTYPE, count=nbytes // 8,
                                                   offset=offset).reshape(shape).astype(np.float64)
            offset += nbytes
        if offset != len(raw):
            raise CorruptCheckpointError(f'{path}: {len(raw) - offset} trailing bytes after payload')

        optimizer = header.get('optimizer')
        if optimizer is not None:
            optimizer = dict(optimizer)
            optimizer['m'], optimizer['v'] = {}, {}
        for name in [n for n in tensors if n.startswith(_OPTIM_PREFIX)]:
            moment, _, param = name[len(_OPTIM_PREFIX):].partition('.')
            arr = tensors.pop(name)
            if optimizer is None:
                raise CorruptCheckpointError(f'{path}: optimizer tensor {name} without optimizer metadata')
            if moment not in ('m', 'v'):
                raise CorruptCheckpointError(f'{path}: unknown optimizer tensor {name}')
            optimizer[moment][param] = arr

        return Checkpoint(
            architecture=header['architecture'],
            tensors=tensors,
            param_mask=header.get('param_mask'),
            optimizer=optimizer,
            seed=header.get('seed', 0),
            epoch=header.get('epoch', 0),
            version=version,
        )

    @staticmethod
    def load_into(ckpt, denoiser):
        if ckpt.architecture.get('tag') != denoiser.architecture_tag:
            raise ArchitectureMismatchError(
                f'checkpoint holds a {ckpt.architecture.get("tag")} network, '
                f'cannot load it into {denoiser.architecture_tag}')
        if ckpt.architecture.get('layers') != denoiser.architecture()['layers']:
            raise ArchitectureMismatchError(f'checkpoint layer list does not match this {denoiser.architecture_tag}')
        denoiser.load_state_dict(ckpt.tensors)
        return denoiser

    @staticmethod
    def to_denoiser(ckpt):
        return CheckpointService.load_into(ckpt, build_denoiser(ckpt.architecture))
