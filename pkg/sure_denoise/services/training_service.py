import csv
import logging
import math
import time
from pathlib import Path

import numpy as np

from sure_denoise.config import Config
from sure_denoise.exceptions import ConfigError, DataError, NumericalError, ShapeError, TrainingAborted
from sure_denoise.models import (
    Checkpoint,
    Dataset,
    EpochRecord,
    NoiseSpec,
    RefineResult,
    RiskObjective,
    TrainConfig,
    TrainResult,
)
from sure_denoise.services.checkpoint_service import CheckpointService
from sure_denoise.services.data_service import DataService
from sure_denoise.services.network_service import Denoiser, apply_param_mask
from sure_denoise.services.noise_service import NoiseService
from sure_denoise.services.risk_service import RiskService
from sure_denoise.utils.rng import Rng
from sure_denoise.utils.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

CSV_COLUMNS = ('epoch', 'objective', 'loss', 'mse_vs_gt', 'divergence_estimate', 'data_fidelity',
               'val_psnr', 'lr', 'wall_ms')


class Optimizer:
    kind = ''

    def __init__(self, named_parameters, lr,
                 weight_decay=0.0, mask=None):
        if not lr > 0:
            raise ConfigError(f'lr must be positive, got {lr}')
        if weight_decay < 0:
            raise ConfigError(f'weight_decay must be >= 0, got {weight_decay}')
        self.names = [name for name, _ in named_parameters]
        self.params = [t for _, t in named_parameters]
        self.lr = lr
        self.weight_decay = weight_decay
        self.mask = list(mask) if mask is not None else [True] * len(self.params)
        if len(self.mask) != len(self.params):
            raise ConfigError(f'mask has {len(self.mask)} entries for {len(self.params)} parameters')
        self.step_count = 0

    def step(self):
        raise NotImplementedError

    def state_dict(self):
        return {'kind': self.kind, 'lr': self.lr, 'weight_decay': self.weight_decay, 'step': self.step_count}

    def load_state_dict(self, state):
        if state.get('kind') != self.kind:
            raise ConfigError(f'optimizer state is for {state.get("kind")!r}, not {self.kind!r}')
        self.lr = state['lr']
        self.weight_decay = state.get('weight_decay', 0.0)
        self.step_count = state.get('step', 0)


class SGD(Optimizer):
    kind = 'sgd'

    def step(self):
        self.step_count += 1
        for p, keep in zip(self.params, self.mask):
            if not keep or p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            p.data = p.data - self.lr * g


class Adam(Optimizer):
    kind = 'adam'

    def __init__(self, named_parameters, lr, weight_decay=0.0, mask=None,
                 beta1=Config.ADAM_BETA1, beta2=Config.ADAM_BETA2, eps=Config.ADAM_EPS):
        super().__init__(named_parameters, lr, weight_decay, mask)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}

    def step(self):
        adam_step(self, self.params, [p.grad for p in self.params], self.mask)

    def state_dict(self):
        state = super().state_dict()
        state.update({'beta1': self.beta1, 'beta2': self.beta2, 'eps': self.eps,
                      'm': {k: v.copy() for k, v in self.m.items()},
                      'v': {k: v.copy() for k, v in self.v.items()}})
        return state

    def load_state_dict(self, state):
        super().load_state_dict(state)
        self.beta1 = state.get('beta1', self.beta1)
        self.beta2 = state.get('beta2', self.beta2)
        self.eps = state.get('eps', self.eps)
        shapes = dict(zip(self.names, (p.shape for p in self.params)))
        for moment in ('m', 'v'):
            for name, arr in (state.get(moment) or {}).items():
                if shapes.get(name) != arr.shape:
                    raise ConfigError(f'optimizer moment {moment}.{name} does not match the parameters')
        self.m = {k: np.array(v) for k, v in (state.get('m') or {}).items()}
        self.v = {k: np.array(v) for k, v in (state.get('v') or {}).items()}


def adam_step(opt, params, grads,
              mask):
    """One bias-corrected Adam update; masked parameters and their moments are left alone."""
    if not len(params) == len(grads) == len(mask):
        raise ShapeError(f'adam_step: {len(params)} params, {len(grads)} grads, {len(mask)} mask entries')
    opt.step_count += 1
    t = opt.step_count
    b1, b2 = opt.beta1, opt.beta2
    for name, p, g, keep in zip(opt.names, params, grads, mask):
        if not keep or g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f'adam_step: gradient {g.shape} for parameter {name} of shape {p.shape}')
        if opt.weight_decay:
            g = g + opt.weight_decay * p.data
        m = opt.m.get(name)
        v = opt.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def make_optimizer(kind, denoiser, lr, weight_decay=0.0):
    cls = {'adam': Adam, 'sgd': SGD}.get(kind)
    if cls is None:
        raise ConfigError('optimizer must be adam or sgd')
    return cls(denoiser.named_parameters(), lr, weight_decay, mask=denoiser.param_mask)


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ShapeError(f'pearson needs two equal-length series of at least 2 values, got {a.shape} and {b.shape}')
    if np.std(a) == 0 or np.std(b) == 0:
        return math.nan
    return float(np.corrcoef(a, b)[0, 1])


def _probe_kind(objective):
    return 'binary' if objective.kind == 'pure' else 'gaussian'


def _epoch_probe(rng, batch, objective, probe_mode):
    """Per-epoch probes are drawn per sample, so they do not depend on how batches are cut."""
    if not objective.uses_estimator:
        return None
    kind = _probe_kind(objective)
    if probe_mode == 'per_batch':
        return NoiseService.probe_like(batch.y, kind, rng.substream('probe', batch.epoch, batch.index, 1)).data
    shape = batch.y.shape[1:]
    draws = []
    for i in batch.indices:
        sub = rng.substream('probe', batch.epoch, int(i))
        draws.append(sub.rademacher(shape) if kind == 'binary' else sub.normal(shape))
    return np.stack(draws)


class _CsvLog:
    def __init__(self, path):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', newline='') as handle:
                csv.DictWriter(handle, fieldnames=CSV_COLUMNS).writeheader()

    def write(self, record):
        if self.path is None:
            return
        row = {k: ('' if v is None else v) for k, v in record.to_dict().items()}
        with open(self.path, 'a', newline='') as handle:
            csv.DictWriter(handle, fieldnames=CSV_COLUMNS).writerow(row)


class TrainingService:
    @staticmethod
    def _validation_noisy(validation, noise, seed):
        if validation.noisy is not None:
            return validation.noisy
        if noise is None or not validation.has_clean:
            return None
        noisy, _ = NoiseService.corrupt(validation.clean, noise, Rng(seed).substream('validation'))
        return noisy.data

    @staticmethod
    def _evaluate_validation(d, validation, noisy,
                             chunk=500):
        """Mean PSNR against clean images (when present) and the mse_reg loss on the noisy ones."""
        outputs = []
        with no_grad():
            for start in range(0, len(noisy), chunk):
                outputs.append(d(noisy[start:start + chunk], 'eval').data)
        out = np.concatenate(outputs)
        reg = float(np.mean(np.sum((out - noisy) ** 2, axis=(1, 2, 3))))
        val_psnr = DataService.mean_psnr(out, validation.clean) if validation.has_clean else None
        return val_psnr, reg

    @staticmethod
    def train(d, ds, cfg, validation=None,
              log_path=None, output_dir=None):
        objective = cfg.objective
        if objective.kind == 'sure_ft':
            raise ConfigError('sure_ft is a single-image objective; use refine')
        if objective.needs_ground_truth:
            ds.require_clean('mse_gt training')
        noise = cfg.noise or ds.noise
        if noise is None and (objective.uses_estimator or ds.noisy is None or cfg.regenerates_noise):
            raise ConfigError(f'{objective.kind} training needs a noise specification')
        if objective.kind == 'pure' and (noise is None or noise.kind != 'poisson'):
            raise ConfigError('pure training needs poisson noise')
        if objective.kind in ('sure', 'blind_sure') and noise.kind != 'gaussian':
            raise ConfigError(f'{objective.kind} training needs gaussian noise')

        rng = Rng(cfg.seed)
        regenerate = cfg.regenerates_noise
        if regenerate and not ds.has_clean:
            raise DataError(f'dataset {ds.name!r} has no clean images to regenerate noise from')
        if not regenerate and ds.noisy is None:
            ds = DataService.corrupt_dataset(ds, noise, rng)
        if objective.kind == 'blind_sure' and ds.sigma is None and not regenerate:
            raise ConfigError('blind_sure training needs per-image sigma in the dataset')

        apply_param_mask(d, 'freeze_batch_norm' if cfg.freeze_batch_norm else 'all_trainable')
        optimizer = make_optimizer(cfg.optimizer, d, cfg.lr, cfg.weight_decay)

        val_noisy = None
        if validation is not None:
            val_noisy = TrainingService._validation_noisy(validation, noise, cfg.seed)
        patience = cfg.early_stopping_patience
        if patience is None:
            patience = Config.EARLY_STOPPING_PATIENCE if objective.kind == 'mse_reg' else 0
        if patience and val_noisy is None:
            logger.warning('early stopping needs validation noisy data; it is disabled for this run')
            patience = 0

        log = _CsvLog(Path(log_path) if log_path else None)
        output_dir = Path(output_dir) if output_dir else None
        history = []
        last_good = CheckpointService.checkpoint_from(d, optimizer, cfg.seed, epoch=0)
        prev_reg, rising, stopped_early = math.inf, 0, False

        logger.info('training %s with %s: %d images, %d epochs, batch %d, %d parameters',
                    d.architecture_tag, objective.kind, len(ds), cfg.epochs, cfg.batch_size, d.num_parameters())
        for epoch in range(cfg.epochs):
            started = time.perf_counter()
            optimizer.lr = cfg.lr_at(epoch)
            epoch_ds, noisy = ds, None
            if regenerate:
                noisy_t, sigma = NoiseService.corrupt(ds.clean, noise, rng.substream('root', epoch))
                noisy = noisy_t.data
                epoch_ds = Dataset(name=ds.name, clean=ds.clean, noisy=noisy, sigma=sigma, noise=noise)

            totals = {'loss': 0.0, 'fidelity': 0.0, 'divergence': 0.0, 'mse': 0.0}
            has_mse = True
            seen = 0
            for batch in DataService.batches(epoch_ds, cfg.batch_size, epoch, rng, noisy=noisy):
                probe = _epoch_probe(rng, batch, objective, cfg.probe_mode)
                d.zero_grad()
                try:
                    loss, report = RiskService.evaluate(
                        d, batch.y, objective, noise, d.architecture_tag, x=batch.x,
                        sigma_per_sample=batch.sigma, probe=probe, mode='train')
                    loss.backward()
                except NumericalError as exc:
                    logger.error('non-finite values in epoch %d batch %d: %s', epoch, batch.index, exc)
                    raise TrainingAborted(f'training aborted in epoch {epoch}: {exc}',
                                          last_good=last_good, epoch=epoch) from exc
                optimizer.step()
                m = len(batch)
                seen += m
                totals['loss'] += report.loss * m
                totals['fidelity'] += report.data_fidelity * m
                totals['divergence'] += report.divergence_estimate * m
                if report.mse_vs_gt is None:
                    has_mse = False
                else:
                    totals['mse'] += report.mse_vs_gt * m
                logger.debug('epoch %d batch %d loss %.6g', epoch, batch.index, report.loss)

            val_psnr = None
            if val_noisy is not None:
                val_psnr, val_reg = TrainingService._evaluate_validation(d, validation, val_noisy)
                if patience:
                    rising = rising + 1 if val_reg > prev_reg else 0
                    prev_reg = val_reg

            record = EpochRecord(
                epoch=epoch + 1,
                objective=objective.kind,
                loss=totals['loss'] / seen,
                mse_vs_gt=totals['mse'] / seen if has_mse else None,
                divergence_estimate=totals['divergence'] / seen,
                data_fidelity=totals['fidelity'] / seen,
                val_psnr=val_psnr,
                lr=optimizer.lr,
                wall_ms=(time.perf_counter() - started) * 1000.0,
            )
            history.append(record)
            log.write(record)
            logger.info('epoch %d/%d loss=%.6g divergence=%.6g val_psnr=%s lr=%g',
                        epoch + 1, cfg.epochs, record.loss, record.divergence_estimate,
                        'n/a' if val_psnr is None else f'{val_psnr:.3f}', record.lr)

            last_good = CheckpointService.checkpoint_from(d, optimizer, cfg.seed, epoch=epoch + 1)
            if output_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                CheckpointService.save_checkpoint(output_dir / f'checkpoint_epoch{epoch + 1:04d}.sure', last_good)
            if patience and rising >= patience:
                logger.info('early stopping after epoch %d: validation loss rose %d epochs in a row',
                            epoch + 1, rising)
                stopped_early = True
                break

        return TrainResult(checkpoint=last_good, history=history, stopped_early=stopped_early)

    @staticmethod
    def _single_image(y_test):
        y = y_test.data if isinstance(y_test, Tensor) else np.asarray(y_test, dtype=np.float64)
        if y.ndim == 2:
            y = y[None, None]
        elif y.ndim == 3:
            y = y[None]
        if y.ndim != 4 or y.shape[0] != 1:
            raise ShapeError(f'refinement works on a single image, got shape {y.shape}')
        return y

    @staticmethod
    def refine(ckpt, y_test, sigma, epochs=Config.REFINE_EPOCHS,
               lr=Config.REFINE_LR, lr_decay_epoch=Config.REFINE_LR_DECAY_EPOCH,
               lr_decayed=Config.REFINE_LR_DECAYED, eps=None,
               seed=Config.DEFAULT_SEED, keep_best=True, log_path=None):
        """Fine-tune a pretrained denoiser on one noisy image by minimizing its SURE.

        Batch-norm layers are frozen. With ``keep_best`` the snapshot with the lowest SURE
        (averaged over fixed evaluation probes) is returned, the starting network included,
        so the reported SURE never increases.
        """
        if epochs < 0:
            raise ConfigError(f'epochs must be >= 0, got {epochs}')
        if not sigma > 0:
            raise ConfigError(f'sigma must be positive, got {sigma}')
        y = TrainingService._single_image(y_test)
        d = CheckpointService.to_denoiser(ckpt)
        apply_param_mask(d, 'freeze_batch_norm')
        schedule = TrainConfig(objective=RiskObjective('sure_ft', eps), epochs=epochs, batch_size=1, lr=lr,
                               lr_decay_epoch=lr_decay_epoch, lr_decayed=lr_decayed, seed=seed)
        if eps is None:
            eps = RiskService.epsilon_rule(d.architecture_tag, sigma * Config.INTENSITY_SCALE)
        optimizer = make_optimizer('adam', d, lr)
        rng = Rng(seed)
        eval_probes = [rng.substream('validation', k).normal(y.shape) for k in range(Config.REFINE_EVAL_PROBES)]

        def sure_eval():
            with no_grad():
                values = [RiskService.sure_ft_loss(d, y, sigma, eps, probe=p, mode='eval')[1].loss
                          for p in eval_probes]
            return float(np.mean(values))

        sure_before = sure_eval()
        best_value, best_state, best_epoch = sure_before, d.state_dict(), 0
        last_value = sure_before
        history = []
        log = _CsvLog(Path(log_path) if log_path else None)
        for epoch in range(epochs):
            started = time.perf_counter()
            optimizer.lr = schedule.lr_at(epoch)
            probe = rng.substream('probe', epoch).normal(y.shape)
            d.zero_grad()
            try:
                loss, report = RiskService.sure_ft_loss(d, y, sigma, eps, probe=probe, mode='train')
                loss.backward()
            except NumericalError as exc:
                raise TrainingAborted(f'refinement aborted in epoch {epoch}: {exc}',
                                      last_good=ckpt, epoch=epoch) from exc
            optimizer.step()
            last_value = sure_eval()
            if last_value < best_value:
                best_value, best_state, best_epoch = last_value, d.state_dict(), epoch + 1
            record = EpochRecord(epoch=epoch + 1, objective='sure_ft', loss=last_value, mse_vs_gt=None,
                                 divergence_estimate=report.divergence_estimate,
                                 data_fidelity=report.data_fidelity, val_psnr=None, lr=optimizer.lr,
                                 wall_ms=(time.perf_counter() - started) * 1000.0)
            history.append(record)
            log.write(record)
            logger.debug('refine epoch %d sure=%.6g', epoch + 1, last_value)

        if keep_best:
            if best_epoch != epochs:
                logger.warning('keeping the epoch-%d snapshot (SURE %.6g) over the final one (SURE %.6g)',
                               best_epoch, best_value, last_value)
                d.load_state_dict(best_state)
            sure_after, result_epoch = best_value, best_epoch
        else:
            sure_after, result_epoch = last_value, epochs
        logger.info('refined for %d epochs: SURE %.6g -> %.6g', epochs, sure_before, sure_after)

        with no_grad():
            denoised = d(y, 'eval').data
        checkpoint = CheckpointService.checkpoint_from(d, optimizer, seed, epoch=result_epoch)
        return RefineResult(checkpoint=checkpoint, denoised=denoised, sure_before=sure_before,
                            sure_after=sure_after, best_epoch=result_epoch, history=history)
