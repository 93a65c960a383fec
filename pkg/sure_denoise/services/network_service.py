import logging
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from sure_denoise.config import Config
from sure_denoise.exceptions import ArchitectureMismatchError, ConfigError, ShapeError
from sure_denoise.models import ARCHITECTURES
from sure_denoise.utils.rng import Rng
from sure_denoise.utils.tensor import (
    Tensor,
    as_tensor,
    batch_norm2d,
    conv2d,
    conv_transpose2d,
    relu,
    sigmoid,
)

logger = logging.getLogger(__name__)

LAYER_KINDS = ('conv2d', 'conv_transpose2d', 'sigmoid', 'relu', 'batch_norm')
MODES = ('train', 'eval')


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    output_padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f'layer kind must be one of: {", ".join(LAYER_KINDS)}')
        if self.in_channels < 1 or self.out_channels < 1 or self.stride < 1:
            raise ConfigError(f'invalid layer spec {self}')

    def output_size(self, h, w):
        kh, kw = self.kernel
        s, p = self.stride, self.padding
        if self.kind == 'conv2d':
            return (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1
        if self.kind == 'conv_transpose2d':
            op = self.output_padding
            return (h - 1) * s - 2 * p + kh + op, (w - 1) * s - 2 * p + kw + op
        return h, w

    def to_dict(self):
        out = asdict(self)
        out['kernel'] = list(self.kernel)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['kernel'] = tuple(data.get('kernel', (1, 1)))
        return cls(**data)


class Layer:
    def __init__(self, spec):
        self.spec = spec
        self.frozen = False

    def parameters(self):
        return []

    def buffers(self):
        return {}

    def __call__(self, x, training):
        raise NotImplementedError


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class Conv2dLayer(Layer):
    def __init__(self, spec, rng, zero_init=False):
        super().__init__(spec)
        kh, kw = spec.kernel
        shape = (spec.out_channels, spec.in_channels, kh, kw)
        fan_in = spec.in_channels * kh * kw
        if zero_init:
            weight, bias = np.zeros(shape), np.zeros(spec.out_channels)
        else:
            weight = _kaiming_uniform(rng, shape, fan_in)
            bias = rng.uniform(-1 / np.sqrt(fan_in), 1 / np.sqrt(fan_in), spec.out_channels)
        self.weight = Tensor(weight, requires_grad=True, name='weight')
        self.bias = Tensor(bias, requires_grad=True, name='bias')

    def parameters(self):
        return [('weight', self.weight), ('bias', self.bias)]

    def __call__(self, x, training):
        return conv2d(x, self.weight, self.bias, stride=self.spec.stride, padding=self.spec.padding)


class ConvTranspose2dLayer(Layer):
    def __init__(self, spec, rng):
        super().__init__(spec)
        kh, kw = spec.kernel
        shape = (spec.in_channels, spec.out_channels, kh, kw)
        fan_in = spec.out_channels * kh * kw
        self.weight = Tensor(_kaiming_uniform(rng, shape, fan_in), requires_grad=True, name='weight')
        bound = 1 / np.sqrt(fan_in)
        self.bias = Tensor(rng.uniform(-bound, bound, spec.out_channels), requires_grad=True, name='bias')

    def parameters(self):
        return [('weight', self.weight), ('bias', self.bias)]

    def __call__(self, x, training):
        s = self.spec
        return conv_transpose2d(x, self.weight, self.bias, stride=s.stride, padding=s.padding,
                                output_padding=s.output_padding)


class BatchNormLayer(Layer):
    """Learnable scale/shift with running statistics.

    A frozen layer normalizes with its running statistics in every mode and never
    updates them, so its whole state stays at the checkpoint value.
    """

    def __init__(self, spec):
        super().__init__(spec)
        c = spec.out_channels
        self.gamma = Tensor(np.ones(c), requires_grad=True, name='gamma')
        self.beta = Tensor(np.zeros(c), requires_grad=True, name='beta')
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def parameters(self):
        return [('gamma', self.gamma), ('beta', self.beta)]

    def buffers(self):
        return {'running_mean': self.running_mean, 'running_var': self.running_var}

    def __call__(self, x, training):
        use_batch = training and not self.frozen
        return batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            use_batch_stats=use_batch, update_running=use_batch,
                            momentum=Config.BN_MOMENTUM, eps=Config.BN_EPS)


class ActivationLayer(Layer):
    def __call__(self, x, training):
        return sigmoid(x) if self.spec.kind == 'sigmoid' else relu(x)


def build_layer(spec, rng, zero_init=False):
    if spec.kind == 'conv2d':
        return Conv2dLayer(spec, rng, zero_init=zero_init)
    if spec.kind == 'conv_transpose2d':
        return ConvTranspose2dLayer(spec, rng)
    if spec.kind == 'batch_norm':
        return BatchNormLayer(spec)
    return ActivationLayer(spec)


class Denoiser:
    """A layer stack h(y; theta); residual stacks return y - CNN(y)."""

    def __init__(self, layers, architecture_tag, residual,
                 options=None):
        if architecture_tag not in ARCHITECTURES:
            raise ConfigError(f'architecture must be one of: {", ".join(ARCHITECTURES)}')
        self.layers = list(layers)
        self.architecture_tag = architecture_tag
        self.residual = residual
        self.options = dict(options or {})
        self.in_channels = self.layers[0].spec.in_channels
        self.param_mask = [True] * len(self.named_parameters())

    def named_parameters(self):
        return [(f'layers.{i}.{name}', t) for i, layer in enumerate(self.layers)
                for name, t in layer.parameters()]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self):
        return {f'layers.{i}.{name}': buf for i, layer in enumerate(self.layers)
                for name, buf in layer.buffers().items()}

    def trainable_parameters(self):
        return [(name, t) for (name, t), keep in zip(self.named_parameters(), self.param_mask) if keep]

    def num_parameters(self):
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def architecture(self):
        return {
            'tag': self.architecture_tag,
            'residual': self.residual,
            'options': dict(self.options),
            'layers': [layer.spec.to_dict() for layer in self.layers],
        }

    def state_dict(self):
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers().items()})
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ArchitectureMismatchError(f'state does not fit {self.architecture_tag}: '
                                            f'missing {missing[:4]}, unexpected {extra[:4]}')
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ArchitectureMismatchError(f'{name}: checkpoint shape {state[name].shape} != {t.shape}')
            t.data = np.array(state[name], dtype=np.float64)
            t.zero_grad()
        for name, buf in buffers.items():
            if state[name].shape != buf.shape:
                raise ArchitectureMismatchError(f'{name}: checkpoint shape {state[name].shape} != {buf.shape}')
            buf[...] = state[name]

    def _check_input(self, y):
        if y.ndim != 4:
            raise ShapeError(f'denoiser expects (B, C, H, W) input, got {y.shape}')
        if y.shape[1] != self.in_channels:
            raise ShapeError(f'{self.architecture_tag} expects {self.in_channels} channel(s), got {y.shape[1]}')
        size = self.options.get('image_size')
        if size is not None and tuple(y.shape[2:]) != tuple(size):
            raise ShapeError(f'{self.architecture_tag} is restricted to {size[0]}x{size[1]} inputs, '
                             f'got {y.shape[2]}x{y.shape[3]}')

    def network(self, y, mode='train'):
        """The raw layer stack; for residual denoisers this is CNN_theta(y)."""
        if mode not in MODES:
            raise ConfigError(f'mode must be train or eval, got {mode!r}')
        y = as_tensor(y)
        self._check_input(y)
        out = y
        training = mode == 'train'
        for layer in self.layers:
            out = layer(out, training)
        return out

    def forward(self, y, mode='train'):
        y = as_tensor(y)
        out = self.network(y, mode)
        return y - out if self.residual else out

    __call__ = forward


def build_sda(in_channels=1, rng=None):
    """Stacked denoising autoencoder: 28x28 -> 14x14 -> 7x7 -> 14x14 -> 28x28."""
    if in_channels < 1:
        raise ConfigError('in_channels must be >= 1')
    rng = rng or Rng(Config.DEFAULT_SEED).substream('init')
    c1, c2 = Config.SDA_CHANNELS
    specs = [
        LayerSpec('conv2d', in_channels, c1, (3, 3), stride=2, padding=1),
        LayerSpec('sigmoid', c1, c1),
        LayerSpec('conv2d', c1, c2, (3, 3), stride=2, padding=1),
        LayerSpec('sigmoid', c2, c2),
        LayerSpec('conv_transpose2d', c2, c1, (3, 3), stride=2, padding=1, output_padding=1),
        LayerSpec('sigmoid', c1, c1),
        LayerSpec('conv_transpose2d', c1, in_channels, (3, 3), stride=2, padding=1, output_padding=1),
        LayerSpec('sigmoid', in_channels, in_channels),
    ]
    options = {'in_channels': in_channels, 'image_size': list(Config.SDA_IMAGE_SIZE)}
    return Denoiser([build_layer(s, rng) for s in specs], 'sda', residual=False, options=options)


def build_dncnn_lite(depth=Config.DNCNN_DEPTH, channels=Config.DNCNN_CHANNELS,
                     in_channels=1, rng=None):
    if depth < 3:
        raise ConfigError(f'dncnn_lite depth must be >= 3, got {depth}')
    rng = rng or Rng(Config.DEFAULT_SEED).substream('init')
    k = (3, 3)
    specs = [LayerSpec('conv2d', in_channels, channels, k, padding=1), LayerSpec('relu', channels, channels)]
    for _ in range(depth - 2):
        specs += [
            LayerSpec('conv2d', channels, channels, k, padding=1),
            LayerSpec('batch_norm', channels, channels),
            LayerSpec('relu', channels, channels),
        ]
    specs.append(LayerSpec('conv2d', channels, in_channels, k, padding=1))
    last = len(specs) - 1
    layers = [build_layer(s, rng, zero_init=(i == last)) for i, s in enumerate(specs)]
    options = {'depth': depth, 'channels': channels, 'in_channels': in_channels}
    return Denoiser(layers, 'dncnn_lite', residual=True, options=options)


def build_denoiser(architecture, rng=None):
    tag = architecture.get('tag')
    options = architecture.get('options', architecture)
    if tag == 'sda':
        return build_sda(int(options.get('in_channels', 1)), rng=rng)
    if tag == 'dncnn_lite':
        return build_dncnn_lite(int(options.get('depth', Config.DNCNN_DEPTH)),
                                int(options.get('channels', Config.DNCNN_CHANNELS)),
                                int(options.get('in_channels', 1)), rng=rng)
    raise ArchitectureMismatchError(f'unknown architecture tag {tag!r}')


def apply_param_mask(denoiser, policy):
    if policy == 'all_trainable':
        denoiser.param_mask = [True] * len(denoiser.named_parameters())
        for layer in denoiser.layers:
            layer.frozen = False
    elif policy == 'freeze_batch_norm':
        mask = []
        for layer in denoiser.layers:
            is_bn = isinstance(layer, BatchNormLayer)
            layer.frozen = is_bn
            mask.extend([not is_bn] * len(layer.parameters()))
        denoiser.param_mask = mask
    else:
        raise ConfigError(f'unknown mask policy {policy!r}')
    frozen = sum(not keep for keep in denoiser.param_mask)
    logger.debug('mask policy %s: %d of %d parameter tensors frozen', policy, frozen, len(denoiser.param_mask))


class IdentityDenoiser:
    """h(y) = y."""

    architecture_tag = 'identity'

    def forward(self, y, mode='train'):
        return as_tensor(y) * 1.0

    __call__ = forward


class ConstantDenoiser:
    architecture_tag = 'constant'

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)

    def forward(self, y, mode='train'):
        y = as_tensor(y)
        return y * 0.0 + Tensor(np.broadcast_to(self.value, y.shape[1:]))

    __call__ = forward


class LinearDenoiser:
    """h(y) = A y per sample, with y flattened to K values."""

    architecture_tag = 'linear'

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ShapeError(f'linear denoiser needs a square matrix, got {self.matrix.shape}')

    def forward(self, y, mode='train'):
        y = as_tensor(y)
        k = self.matrix.shape[0]
        flat = y.reshape(y.shape[0], -1)
        if flat.shape[1] != k:
            raise ShapeError(f'linear denoiser of size {k} got {flat.shape[1]} values per sample')
        return (flat @ Tensor(self.matrix.T)).reshape(y.shape)

    __call__ = forward
