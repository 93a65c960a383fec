import csv
import json

import numpy as np
import pytest

from sure_denoise.app import main
from sure_denoise.services.checkpoint_service import CheckpointService
from sure_denoise.services.training_service import CSV_COLUMNS
from sure_denoise.utils import imageio


def _write_config(path, document):
    path.write_text(json.dumps(document))
    return str(path)


def _synthetic(n=8, size=(12, 12)):
    return {'kind': 'synthetic', 'n': n, 'size': list(size), 'pattern': 'gradients'}


def _tiny_train_config(out, **overrides):
    document = {
        'seed': 3,
        'output_dir': str(out),
        'dataset': _synthetic(),
        'architecture': {'tag': 'dncnn_lite', 'depth': 3, 'channels': 4},
        'objective': {'kind': 'sure'},
        'noise': {'kind': 'gaussian', 'sigma': 25},
        'training': {'epochs': 2, 'batch_size': 4},
    }
    document.update(overrides)
    return document


def test_missing_subcommand():
    assert main([]) == 2


def test_missing_config_file(tmp_path):
    assert main(['train', '--config', str(tmp_path / 'absent.json')]) == 2


def test_invalid_config_names_the_field(tmp_path, caplog):
    document = _tiny_train_config(tmp_path / 'run')
    document['training'] = {'epochs': 'ten'}
    assert main(['train', '--config', _write_config(tmp_path / 'cfg.json', document)]) == 2
    assert 'training.epochs' in caplog.text


def test_unknown_suite(tmp_path):
    assert main(['validate', 'speed', '--output-dir', str(tmp_path)]) == 2


def test_corrupt_writes_manifest_and_previews(tmp_path):
    out = tmp_path / 'corrupt'
    document = {'seed': 4, 'output_dir': str(out), 'dataset': _synthetic(n=3),
                'noise': {'kind': 'gaussian', 'sigma': 10}, 'previews': True}
    assert main(['corrupt', '--config', _write_config(tmp_path / 'cfg.json', document), '--sigma', '30']) == 0
    manifest = json.loads((out / 'noisy.json').read_text())
    assert manifest['seed'] == 4
    assert manifest['noise']['sigma'] == pytest.approx(30 / 255)
    assert (out / manifest['arrays']['noisy']).exists()
    assert len(list((out / 'previews').glob('noisy_*.pgm'))) == 3
    assert json.loads((out / 'config.json').read_text())['noise']['sigma'] == 30


def test_train_writes_checkpoint_log_and_summary(tmp_path):
    out = tmp_path / 'run'
    cfg = _write_config(tmp_path / 'cfg.json', _tiny_train_config(out))
    assert main(['train', '--config', cfg, '--epochs', '3']) == 0
    summary = json.loads((out / 'summary.json').read_text())
    assert summary['epochs_run'] == 3
    assert summary['objective'] == 'sure'
    with open(out / 'train_log.csv', newline='') as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 3 and tuple(rows[0]) == CSV_COLUMNS
    ckpt = CheckpointService.load_checkpoint(out / 'checkpoint.sure')
    assert ckpt.architecture['tag'] == 'dncnn_lite'
    assert ckpt.epoch == 3


def test_mse_gt_on_gt_free_data_is_a_data_error(tmp_path):
    corrupt_cfg = {'output_dir': str(tmp_path / 'noisy'), 'dataset': _synthetic(n=4),
                   'noise': {'kind': 'gaussian', 'sigma': 25}}
    assert main(['corrupt', '--config', _write_config(tmp_path / 'c.json', corrupt_cfg)]) == 0
    dataset = {'kind': 'manifest', 'path': str(tmp_path / 'noisy' / 'noisy.json'), 'ground_truth': False}
    document = _tiny_train_config(tmp_path / 'run', dataset=dataset, objective={'kind': 'mse_gt'})
    assert main(['train', '--config', _write_config(tmp_path / 't.json', document)]) == 3


def test_sda_rejects_other_image_sizes(tmp_path, sda):
    CheckpointService.save_checkpoint(tmp_path / 'sda.sure', CheckpointService.checkpoint_from(sda))
    np.save(tmp_path / 'big.npy', np.zeros((32, 32)))
    code = main(['denoise', '--checkpoint', str(tmp_path / 'sda.sure'), '--images', str(tmp_path / 'big.npy'),
                 '--output-dir', str(tmp_path / 'out')])
    assert code == 3


def test_refine_without_epochs_matches_denoise(tmp_path, tiny_dncnn):
    last = tiny_dncnn.layers[-1]
    last.weight.data = np.random.default_rng(0).normal(0, 0.1, last.weight.shape)
    CheckpointService.save_checkpoint(tmp_path / 'net.sure', CheckpointService.checkpoint_from(tiny_dncnn))
    noisy = np.random.default_rng(1).uniform(size=(12, 12))
    np.save(tmp_path / 'noisy.npy', noisy)
    np.save(tmp_path / 'clean.npy', np.clip(noisy, 0.2, 0.8))

    assert main(['refine', '--checkpoint', str(tmp_path / 'net.sure'), '--image', str(tmp_path / 'noisy.npy'),
                 '--sigma', '25', '--epochs', '0', '--gt', str(tmp_path / 'clean.npy'),
                 '--output-dir', str(tmp_path / 'refined')]) == 0
    assert main(['denoise', '--checkpoint', str(tmp_path / 'net.sure'), '--images', str(tmp_path / 'noisy.npy'),
                 '--output-dir', str(tmp_path / 'plain')]) == 0

    refined = imageio.load_array(tmp_path / 'refined' / 'denoised.npy')
    plain = imageio.load_array(tmp_path / 'plain' / 'noisy_denoised.npy')
    assert np.array_equal(refined, plain)
    summary = json.loads((tmp_path / 'refined' / 'summary.json').read_text())
    assert summary['sure_before'] == summary['sure_after']
    assert summary['psnr_before'] == summary['psnr_after']
    assert (tmp_path / 'refined' / 'refined.sure').exists()


def test_refine_needs_sigma(tmp_path):
    assert main(['refine', '--checkpoint', 'net.sure', '--image', 'y.pgm', '--output-dir', str(tmp_path)]) == 2


def test_validate_identity_suites(tmp_path, capsys):
    out = tmp_path / 'validate'
    code = main(['validate', '--arch', 'identity', '--n-draws', '200', '--realizations', '200',
                 '--output-dir', str(out)])
    assert code == 0
    reports = json.loads((out / 'report.json').read_text())
    assert [r['test'] for r in reports] == ['divergence', 'unbiasedness', 'pure']
    assert reports[0]['oracle'] == 784
    text = (out / 'report.txt').read_text()
    assert '[PASS] divergence' in text
    assert '[PASS] divergence' in capsys.readouterr().out


def test_validate_linear_divergence(tmp_path):
    out = tmp_path / 'validate'
    assert main(['validate', 'divergence', '--arch', 'linear', '--n-draws', '2000', '--output-dir', str(out)]) == 0
    report = json.loads((out / 'report.json').read_text())[0]
    assert 'trace(A)' in ' '.join(report['notes'])
