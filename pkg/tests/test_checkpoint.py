import json
import struct

import numpy as np
import pytest

from sure_denoise.config import Config
from sure_denoise.exceptions import (
    ArchitectureMismatchError,
    CheckpointVersionError,
    CorruptCheckpointError,
    DataError,
)
from sure_denoise.services.checkpoint_service import CheckpointService
from sure_denoise.services.network_service import apply_param_mask, build_dncnn_lite
from sure_denoise.services.training_service import Adam
from sure_denoise.utils.rng import Rng
from sure_denoise.utils.tensor import reduce_sum


def _trained_step(d):
    optimizer = Adam(d.named_parameters(), 1e-2, mask=d.param_mask)
    y = np.random.default_rng(0).normal(size=(2, 1, 8, 8))
    d.zero_grad()
    out = d(y, 'train')
    reduce_sum(out * out).backward()
    optimizer.step()
    return optimizer


def test_round_trip_is_bit_exact(tmp_path, tiny_dncnn):
    optimizer = _trained_step(tiny_dncnn)
    ckpt = CheckpointService.checkpoint_from(tiny_dncnn, optimizer, seed=3, epoch=7)
    CheckpointService.save_checkpoint(tmp_path / 'net.sure', ckpt)
    loaded = CheckpointService.load_checkpoint(tmp_path / 'net.sure')
    assert loaded.seed == 3 and loaded.epoch == 7
    assert loaded.architecture == tiny_dncnn.architecture()
    restored = CheckpointService.to_denoiser(loaded)
    y = np.random.default_rng(1).normal(size=(1, 1, 9, 9))
    assert np.array_equal(restored(y, 'eval').data, tiny_dncnn(y, 'eval').data)
    for name, value in tiny_dncnn.state_dict().items():
        assert np.array_equal(loaded.tensors[name], value)


def test_sda_round_trip(tmp_path, sda):
    CheckpointService.save_checkpoint(tmp_path / 'sda.sure', CheckpointService.checkpoint_from(sda))
    restored = CheckpointService.to_denoiser(CheckpointService.load_checkpoint(tmp_path / 'sda.sure'))
    y = np.random.default_rng(2).uniform(size=(1, 1, 28, 28))
    assert np.array_equal(restored(y, 'eval').data, sda(y, 'eval').data)


def test_optimizer_moments_survive(tmp_path, tiny_dncnn):
    optimizer = _trained_step(tiny_dncnn)
    ckpt = CheckpointService.checkpoint_from(tiny_dncnn, optimizer)
    CheckpointService.save_checkpoint(tmp_path / 'net.sure', ckpt)
    loaded = CheckpointService.load_checkpoint(tmp_path / 'net.sure')
    assert loaded.optimizer['kind'] == 'adam'
    assert loaded.optimizer['step'] == 1
    assert set(loaded.optimizer['m']) == set(optimizer.m)
    for name, value in optimizer.v.items():
        assert np.array_equal(loaded.optimizer['v'][name], value)
    assert not any(name.startswith('optim.') for name in loaded.tensors)

    resumed = Adam(tiny_dncnn.named_parameters(), 1e-2)
    resumed.load_state_dict(loaded.optimizer)
    assert resumed.step_count == 1
    assert np.array_equal(resumed.m['layers.0.weight'], optimizer.m['layers.0.weight'])


def test_param_mask_is_stored(tmp_path, tiny_dncnn):
    apply_param_mask(tiny_dncnn, 'freeze_batch_norm')
    CheckpointService.save_checkpoint(tmp_path / 'net.sure', CheckpointService.checkpoint_from(tiny_dncnn))
    loaded = CheckpointService.load_checkpoint(tmp_path / 'net.sure')
    assert loaded.param_mask == tiny_dncnn.param_mask
    assert loaded.optimizer is None


def test_truncated_file(tmp_path, tiny_dncnn):
    path = CheckpointService.save_checkpoint(tmp_path / 'net.sure', CheckpointService.checkpoint_from(tiny_dncnn))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CorruptCheckpointError):
        CheckpointService.load_checkpoint(path)
    path.write_bytes(raw[:15])
    with pytest.raises(CorruptCheckpointError):
        CheckpointService.load_checkpoint(path)


def test_trailing_bytes(tmp_path, tiny_dncnn):
    path = CheckpointService.save_checkpoint(tmp_path / 'net.sure', CheckpointService.checkpoint_from(tiny_dncnn))
    path.write_bytes(path.read_bytes() + b'\x00' * 8)
    with pytest.raises(CorruptCheckpointError):
        CheckpointService.load_checkpoint(path)


def test_bad_magic(tmp_path):
    (tmp_path / 'net.sure').write_bytes(b'PK\x03\x04' + b'\x00' * 40)
    with pytest.raises(CorruptCheckpointError):
        CheckpointService.load_checkpoint(tmp_path / 'net.sure')


def _write_header(path, header):
    body = json.dumps(header).encode('utf-8')
    path.write_bytes(Config.CHECKPOINT_MAGIC + struct.pack('<I', len(body)) + body)
    return path


@pytest.mark.parametrize('header', [
    [1, 2, 3],
    'checkpoint',
    {'version': Config.CHECKPOINT_VERSION},
    {'version': Config.CHECKPOINT_VERSION, 'architecture': {'tag': 'sda'}, 'entries': [{'dtype': '<f8'}]},
    {'version': Config.CHECKPOINT_VERSION, 'architecture': {'tag': 'sda'},
     'entries': [{'name': 'w', 'shape': 'big', 'dtype': '<f8'}]},
    {'version': Config.CHECKPOINT_VERSION, 'architecture': {'tag': 'sda'}, 'optimizer': [0.9]},
])
def test_malformed_header_is_corrupt(tmp_path, header):
    path = _write_header(tmp_path / 'net.sure', header)
    with pytest.raises(CorruptCheckpointError):
        CheckpointService.load_checkpoint(path)


def test_unsupported_version(tmp_path, tiny_dncnn):
    ckpt = CheckpointService.checkpoint_from(tiny_dncnn)
    ckpt.version = 2
    CheckpointService.save_checkpoint(tmp_path / 'net.sure', ckpt)
    with pytest.raises(CheckpointVersionError):
        CheckpointService.load_checkpoint(tmp_path / 'net.sure')


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        CheckpointService.load_checkpoint(tmp_path / 'absent.sure')


def test_architecture_mismatch(tmp_path, sda, tiny_dncnn):
    CheckpointService.save_checkpoint(tmp_path / 'sda.sure', CheckpointService.checkpoint_from(sda))
    ckpt = CheckpointService.load_checkpoint(tmp_path / 'sda.sure')
    with pytest.raises(ArchitectureMismatchError):
        CheckpointService.load_into(ckpt, tiny_dncnn)

    wider = build_dncnn_lite(depth=3, channels=6, rng=Rng(0))
    with pytest.raises(ArchitectureMismatchError):
        CheckpointService.load_into(CheckpointService.checkpoint_from(tiny_dncnn), wider)
