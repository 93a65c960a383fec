import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from sure_denoise.config import Config
from sure_denoise.exceptions import ConfigError, GroundTruthUnavailableError, ShapeError

NOISE_KINDS = ('gaussian', 'poisson')
OBJECTIVE_KINDS = ('mse_gt', 'mse_reg', 'sure', 'blind_sure', 'sure_ft', 'pure')
GT_FREE_OBJECTIVES = ('mse_reg', 'sure', 'blind_sure', 'sure_ft', 'pure')
ARCHITECTURES = ('sda', 'dncnn_lite')


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption description; sigma and zeta are in [0, 1] intensity units."""

    kind: str = 'gaussian'
    sigma: float = 0.0
    zeta: float = 0.0
    sigma_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f'noise kind must be one of: {", ".join(NOISE_KINDS)}')
        if self.kind == 'gaussian':
            has_sigma = self.sigma > 0
            has_range = self.sigma_range is not None
            if has_sigma == has_range:
                raise ConfigError('gaussian noise needs either sigma > 0 or a sigma_range, not both')
            if has_range:
                lo, hi = self.sigma_range
                if not 0 <= lo < hi:
                    raise ConfigError(f'sigma_range must satisfy 0 <= lo < hi, got {self.sigma_range}')
        elif self.zeta <= 0:
            raise ConfigError('poisson noise needs zeta > 0')

    @property
    def blind(self):
        return self.sigma_range is not None

    @classmethod
    def from_255(cls, kind='gaussian', sigma=0.0, zeta=0.0, sigma_range=None):
        scale = Config.INTENSITY_SCALE
        rng = None if sigma_range is None else (sigma_range[0] / scale, sigma_range[1] / scale)
        return cls(kind=kind, sigma=sigma / scale, zeta=zeta, sigma_range=rng)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class RiskObjective:
    """Training objective; ``epsilon=None`` means the architecture rule decides."""

    kind: str = 'sure'
    epsilon: Optional[float] = None

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigError(f'objective must be one of: {", ".join(OBJECTIVE_KINDS)}')
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError(f'epsilon must be positive, got {self.epsilon}')

    @property
    def needs_ground_truth(self):
        return self.kind == 'mse_gt'

    @property
    def uses_estimator(self):
        return self.kind in ('sure', 'blind_sure', 'sure_ft', 'pure')


@dataclass
class LossReport:
    """Parts of one risk evaluation; ``loss == data_fidelity - noise_term + divergence_term``."""

    objective: str
    loss: float
    data_fidelity: float
    noise_term: float = 0.0
    divergence_estimate: float = 0.0
    divergence_term: float = 0.0
    mse_vs_gt: Optional[float] = None
    epsilon: Optional[float] = None

    def reconstructed(self):
        return self.data_fidelity - self.noise_term + self.divergence_term

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    """Images as (N, C, H, W) float arrays in [0, 1]; ``clean`` is absent for GT-free data."""

    name: str
    clean: Optional[np.ndarray] = None
    noisy: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    noise: Optional[NoiseSpec] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        arrays = [a for a in (self.clean, self.noisy) if a is not None]
        if not arrays:
            raise ShapeError(f'dataset {self.name!r} has neither clean nor noisy images')
        for a in arrays:
            if a.ndim != 4:
                raise ShapeError(f'dataset {self.name!r}: images must be (N, C, H, W), got {a.shape}')
        if len(arrays) == 2 and self.clean.shape != self.noisy.shape:
            raise ShapeError(
                f'dataset {self.name!r}: clean {self.clean.shape} and noisy {self.noisy.shape} differ')
        if self.sigma is not None and len(self.sigma) != len(self):
            raise ShapeError(f'dataset {self.name!r}: {len(self.sigma)} sigmas for {len(self)} images')

    def __len__(self):
        return (self.clean if self.clean is not None else self.noisy).shape[0]

    @property
    def image_shape(self):
        return tuple((self.clean if self.clean is not None else self.noisy).shape[1:])

    @property
    def channels(self):
        return self.image_shape[0]

    @property
    def has_clean(self):
        return self.clean is not None

    def require_clean(self, purpose='this operation'):
        if self.clean is None:
            raise GroundTruthUnavailableError(f'dataset {self.name!r} has no clean images; {purpose} needs them')
        return self.clean

    def without_clean(self):
        if self.noisy is None:
            raise GroundTruthUnavailableError(f'dataset {self.name!r} has no noisy images to keep')
        return replace(self, clean=None)

    def subset(self, indices):
        indices = np.asarray(indices)
        pick = lambda a: None if a is None else a[indices]
        return replace(self, clean=pick(self.clean), noisy=pick(self.noisy),
                       sigma=pick(self.sigma), labels=pick(self.labels))


@dataclass
class Batch:
    y: np.ndarray
    x: Optional[np.ndarray]
    sigma: Optional[np.ndarray]
    indices: np.ndarray
    epoch: int
    index: int

    def __len__(self):
        return self.y.shape[0]


@dataclass
class TrainConfig:
    objective: RiskObjective = field(default_factory=RiskObjective)
    noise: Optional[NoiseSpec] = None
    epochs: int = Config.TRAIN_EPOCHS
    batch_size: int = Config.TRAIN_BATCH_SIZE
    optimizer: str = 'adam'
    lr: float = Config.TRAIN_LR
    lr_decay_epoch: Optional[int] = None
    lr_decayed: Optional[float] = None
    weight_decay: float = 0.0
    seed: int = Config.DEFAULT_SEED
    checkpoint_every: int = 0
    probe_mode: str = 'per_epoch'
    regenerate_noise: Optional[bool] = None
    early_stopping_patience: Optional[int] = None
    freeze_batch_norm: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f'epochs must be >= 0, got {self.epochs}')
        if self.batch_size < 1:
            raise ConfigError(f'batch_size must be >= 1, got {self.batch_size}')
        if not self.lr > 0:
            raise ConfigError(f'lr must be positive, got {self.lr}')
        if self.optimizer not in ('adam', 'sgd'):
            raise ConfigError('optimizer must be adam or sgd')
        if self.probe_mode not in ('per_epoch', 'per_batch'):
            raise ConfigError('probe_mode must be per_epoch or per_batch')

    def lr_at(self, epoch):
        if self.lr_decay_epoch is not None and self.lr_decayed is not None and epoch >= self.lr_decay_epoch:
            return self.lr_decayed
        return self.lr

    @property
    def regenerates_noise(self):
        if self.regenerate_noise is not None:
            return self.regenerate_noise
        return self.objective.kind == 'mse_gt'

    def to_dict(self):
        out = asdict(self)
        out['noise'] = None if self.noise is None else self.noise.to_dict()
        return out


@dataclass
class Checkpoint:
    architecture: Dict[str, Any]
    tensors: Dict[str, np.ndarray]
    param_mask: Optional[List[bool]] = None
    optimizer: Optional[Dict[str, Any]] = None
    seed: int = 0
    epoch: int = 0
    version: int = Config.CHECKPOINT_VERSION


@dataclass
class OracleReport:
    test: str
    estimate: float
    oracle: float
    samples: int
    stderr: float
    tolerance: float
    tolerance_rule: str
    passed: bool
    informational: bool = False
    elevated_variance: bool = False
    linearization_gap: Optional[float] = None
    notes: List[str] = field(default_factory=list)

    @property
    def abs_error(self):
        return abs(self.estimate - self.oracle)

    @property
    def rel_error(self):
        if self.oracle == 0:
            return math.inf if self.abs_error else 0.0
        return self.abs_error / abs(self.oracle)

    def to_dict(self):
        out = asdict(self)
        out['abs_error'] = self.abs_error
        out['rel_error'] = self.rel_error
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, default=float)

    def to_text(self):
        verdict = 'INFO' if self.informational else ('PASS' if self.passed else 'FAIL')
        lines = [
            f'[{verdict}] {self.test}',
            f'  estimate={self.estimate:.6g} oracle={self.oracle:.6g} '
            f'abs_err={self.abs_error:.3g} rel_err={self.rel_error:.3g}',
            f'  samples={self.samples} stderr={self.stderr:.3g} '
            f'tolerance={self.tolerance:.3g} ({self.tolerance_rule})',
        ]
        if self.linearization_gap is not None:
            lines.append(f'  linearization gap={self.linearization_gap:.3g}')
        if self.elevated_variance:
            lines.append('  elevated estimator variance')
        lines.extend(f'  note: {note}' for note in self.notes)
        return '\n'.join(lines)


@dataclass
class EpochRecord:
    epoch: int
    objective: str
    loss: float
    mse_vs_gt: Optional[float]
    divergence_estimate: float
    data_fidelity: float
    val_psnr: Optional[float]
    lr: float
    wall_ms: float

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[EpochRecord]
    stopped_early: bool = False


@dataclass
class RefineResult:
    checkpoint: Checkpoint
    denoised: np.ndarray
    sure_before: float
    sure_after: float
    best_epoch: int
    history: List[EpochRecord]
