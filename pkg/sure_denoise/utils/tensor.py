"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable op is a ``Function`` subclass with a numpy ``forward`` and a
``backward`` that maps the output gradient to one gradient per input. The tape is
rebuilt on every forward pass: each result tensor keeps a reference to the
``Function`` that produced it, and ``Tensor.backward`` walks that graph in reverse
topological order.
"""
import logging
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sure_denoise.exceptions import GradientError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


def _check_finite(arr, op, phase):
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(f'{op} produced {bad} non-finite value(s) during {phase}')


def broadcast_shape(a, b, op):
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise ShapeError(f'{op}: shapes {a} and {b} are not broadcastable') from None


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


def _normalize_axes(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    normalized = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f'invalid axis {a} for tensor of rank {ndim}')
        normalized.append(int(a) % ndim)
    if len(set(normalized)) != len(normalized):
        raise ShapeError(f'repeated axis in {tuple(axes)}')
    return tuple(sorted(normalized))


class Function:
    name = 'function'

    def __init__(self, *inputs):
        self.inputs = inputs

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError(f'{type(self).__name__} has no forward pass')

    def backward(self, grad):
        raise NotImplementedError(f'{type(self).__name__} has no backward pass')

    @classmethod
    def apply(cls, *inputs, **kwargs):
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        _check_finite(out, cls.name, 'forward')
        requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
        return Tensor._wrap(out, creator=fn if requires_grad else None, requires_grad=requires_grad)


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients into
    ``grad`` on every ``backward`` call until ``zero_grad`` is called.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=DTYPE)
        if any(extent <= 0 for extent in arr.shape):
            raise ShapeError(f'tensor extents must be positive, got shape {arr.shape}')
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._creator = None

    @classmethod
    def _wrap(cls, arr, creator=None,
              requires_grad=False):
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(arr, dtype=DTYPE)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._creator = creator
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._creator is None

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f'item() needs a single value, tensor has shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        # None reads as an all-zero gradient everywhere
        self.grad = None

    def detach(self):
        return Tensor._wrap(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf.

        A loss with no path to a leaf (a constant) leaves that leaf's ``grad`` untouched,
        so after ``zero_grad`` it stays None, which reads as zero.
        """
        if self.data.size != 1:
            raise GradientError(f'backward needs a scalar loss, got shape {self.shape}')
        if not self.requires_grad:
            return

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node._creator is not None:
                for parent in node._creator.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._creator is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            fn = node._creator
            input_grads = fn.backward(g)
            for parent, pg in zip(fn.inputs, input_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, fn.name, 'backward')
                pg = unbroadcast(pg, parent.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent): return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def relu(self):
        return ReLU.apply(self)

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f'Tensor(shape={self.shape}{flag})'


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Add(Function):
    name = 'add'

    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape, self.name)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    name = 'sub'

    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape, self.name)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    name = 'mul'

    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape, self.name)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    name = 'div'

    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape, self.name)
        self.a, self.b = a, b
        with np.errstate(divide='ignore', invalid='ignore'):
            return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    name = 'neg'

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Power(Function):
    name = 'pow'

    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        p = self.exponent
        if p == 2:
            return (2.0 * grad * self.a,)
        return (grad * p * self.a ** (p - 1),)


class MatMul(Function):
    name = 'matmul'

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f'matmul: incompatible shapes {a.shape} and {b.shape}')
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Sum(Function):
    name = 'reduce_sum'

    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims))

    def _expand(self, grad):
        if self.axes is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return np.broadcast_to(grad, self.in_shape).copy()

    def backward(self, grad):
        return (self._expand(grad),)


class Mean(Sum):
    name = 'reduce_mean'

    def forward(self, a, axis=None, keepdims=False):
        out = super().forward(a, axis, keepdims)
        axes = self.axes if self.axes is not None else tuple(range(a.ndim))
        self.count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        return out / self.count

    def backward(self, grad):
        return (self._expand(grad) / self.count,)


class Reshape(Function):
    name = 'reshape'

    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f'reshape: cannot view shape {a.shape} as {tuple(shape)}') from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Sigmoid(Function):
    name = 'sigmoid'

    def forward(self, a):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class ReLU(Function):
    name = 'relu'

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


def _output_extent(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp, kh, kw, stride, out_h, out_w):
    """Gather (B, C*kh*kw, out_h*out_w) columns from a padded batch."""
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    view = view[:, :, :out_h, :out_w]
    b, c = xp.shape[:2]
    return view.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, out_h * out_w)


def _scatter(cols, channels, kh, kw, h, w,
             stride, out_h, out_w):
    """Adjoint of ``_windows``: add (B, C*kh*kw, h*w) columns into a (B, C, out_h, out_w) canvas."""
    b = cols.shape[0]
    cols = cols.reshape(b, channels, kh, kw, h, w)
    canvas = np.zeros((b, channels, out_h, out_w), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += cols[:, :, i, j]
    return canvas


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


class Conv2d(Function):
    name = 'conv2d'

    def forward(self, x, weight, bias, stride=1, padding=0):
        if x.ndim != 4:
            raise ShapeError(f'conv2d expects a (B, C, H, W) input, got {x.shape}')
        out_c, in_c, kh, kw = weight.shape
        if x.shape[1] != in_c:
            raise ShapeError(f'conv2d: input has {x.shape[1]} channels, weight {weight.shape} expects {in_c}')
        b, _, h, w = x.shape
        out_h = _output_extent(h, kh, stride, padding)
        out_w = _output_extent(w, kw, stride, padding)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f'conv2d: input {x.shape} too small for kernel {(kh, kw)}')
        self.x_shape, self.w_shape = x.shape, weight.shape
        self.stride, self.padding = stride, padding
        self.out_hw = (out_h, out_w)
        self.cols = _windows(_pad(x, padding), kh, kw, stride, out_h, out_w)
        self.w2 = weight.reshape(out_c, -1)
        out = np.matmul(self.w2, self.cols).reshape(b, out_c, out_h, out_w)
        return out + bias.reshape(1, -1, 1, 1)

    def backward(self, grad):
        b, in_c, h, w = self.x_shape
        out_c, _, kh, kw = self.w_shape
        out_h, out_w = self.out_hw
        g2 = grad.reshape(b, out_c, out_h * out_w)
        grad_w = np.tensordot(g2, self.cols, axes=([0, 2], [0, 2])).reshape(self.w_shape)
        grad_b = grad.sum(axis=(0, 2, 3))
        dcols = np.matmul(self.w2.T, g2)
        p = self.padding
        canvas = _scatter(dcols, in_c, kh, kw, out_h, out_w, self.stride, h + 2 * p, w + 2 * p)
        grad_x = canvas[:, :, p:p + h, p:p + w]
        return grad_x, grad_w, grad_b


class ConvTranspose2d(Function):
    """Transposed convolution; weight layout is (in_channels, out_channels, kh, kw)."""

    name = 'conv_transpose2d'

    def forward(self, x, weight, bias, stride=1, padding=0, output_padding=0):
        if x.ndim != 4:
            raise ShapeError(f'conv_transpose2d expects a (B, C, H, W) input, got {x.shape}')
        in_c, out_c, kh, kw = weight.shape
        if x.shape[1] != in_c:
            raise ShapeError(
                f'conv_transpose2d: input has {x.shape[1]} channels, weight {weight.shape} expects {in_c}')
        if not 0 <= output_padding < stride:
            raise ShapeError(f'output_padding {output_padding} must be smaller than stride {stride}')
        b, _, h, w = x.shape
        full_h = (h - 1) * stride + kh + output_padding
        full_w = (w - 1) * stride + kw + output_padding
        out_h, out_w = full_h - 2 * padding, full_w - 2 * padding
        if out_h < 1 or out_w < 1:
            raise ShapeError(f'conv_transpose2d: padding {padding} leaves no output for input {x.shape}')
        self.x2 = x.reshape(b, in_c, h * w)
        self.x_shape, self.w_shape = x.shape, weight.shape
        self.stride, self.padding = stride, padding
        self.w2 = weight.reshape(in_c, -1)
        cols = np.matmul(self.w2.T, self.x2)
        canvas = _scatter(cols, out_c, kh, kw, h, w, stride, full_h, full_w)
        out = canvas[:, :, padding:padding + out_h, padding:padding + out_w]
        return out + bias.reshape(1, -1, 1, 1)

    def backward(self, grad):
        b, in_c, h, w = self.x_shape
        _, out_c, kh, kw = self.w_shape
        dcols = _windows(_pad(grad, self.padding), kh, kw, self.stride, h, w)
        grad_x = np.matmul(self.w2, dcols).reshape(self.x_shape)
        grad_w = np.tensordot(self.x2, dcols, axes=([0, 2], [0, 2])).reshape(self.w_shape)
        grad_b = grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w, grad_b


class BatchNorm2d(Function):
    """Per-channel normalization over (B, H, W).

    With ``use_batch_stats`` the batch mean and biased variance normalize the input and,
    when ``update_running`` is set, the running buffers move by ``momentum`` towards
    the batch mean and unbiased variance. Otherwise the running buffers normalize.
    """

    name = 'batch_norm2d'
    _axes = (0, 2, 3)

    def forward(self, x, gamma, beta, running_mean, running_var, use_batch_stats=True,
                update_running=True, momentum=0.1, eps=1e-5):
        if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
            raise ShapeError(f'batch_norm2d: input {x.shape} does not match {gamma.shape[0]} channels')
        self.use_batch_stats = use_batch_stats
        if use_batch_stats:
            mean = x.mean(axis=self._axes)
            var = x.var(axis=self._axes)
            if update_running:
                n = x.size // x.shape[1]
                unbiased = var * n / (n - 1) if n > 1 else var
                running_mean *= 1.0 - momentum
                running_mean += momentum * mean
                running_var *= 1.0 - momentum
                running_var += momentum * unbiased
        else:
            mean, var = running_mean, running_var
        self.inv_std = (1.0 / np.sqrt(var + eps)).reshape(1, -1, 1, 1)
        self.xhat = (x - mean.reshape(1, -1, 1, 1)) * self.inv_std
        self.gamma = gamma.reshape(1, -1, 1, 1)
        return self.gamma * self.xhat + beta.reshape(1, -1, 1, 1)

    def backward(self, grad):
        grad_gamma = (grad * self.xhat).sum(axis=self._axes)
        grad_beta = grad.sum(axis=self._axes)
        dxhat = grad * self.gamma
        if not self.use_batch_stats:
            return dxhat * self.inv_std, grad_gamma, grad_beta
        n = grad.size // grad.shape[1]
        grad_x = (self.inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=self._axes, keepdims=True)
            - self.xhat * (dxhat * self.xhat).sum(axis=self._axes, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta


def add(a, b):
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a, b):
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a, b):
    return Mul.apply(as_tensor(a), as_tensor(b))


def div(a, b):
    return Div.apply(as_tensor(a), as_tensor(b))


def neg(a):
    return Neg.apply(as_tensor(a))


def power(a, exponent):
    return Power.apply(as_tensor(a), exponent=float(exponent))


def square(a):
    return power(a, 2)


def matmul(a, b):
    return MatMul.apply(as_tensor(a), as_tensor(b))


def reduce_sum(a, axis=None, keepdims=False):
    return Sum.apply(as_tensor(a), axis=axis, keepdims=keepdims)


def reduce_mean(a, axis=None, keepdims=False):
    return Mean.apply(as_tensor(a), axis=axis, keepdims=keepdims)


def sigmoid(a):
    return Sigmoid.apply(as_tensor(a))


def relu(a):
    return ReLU.apply(as_tensor(a))


def detach(a):
    return as_tensor(a).detach()


def backward(loss):
    loss.backward()


def conv2d(x, weight, bias, stride=1, padding=0):
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x, weight, bias, stride=1, padding=0,
                     output_padding=0):
    return ConvTranspose2d.apply(x, weight, bias, stride=stride, padding=padding,
                                 output_padding=output_padding)


def batch_norm2d(x, gamma, beta, running_mean,
                 running_var, use_batch_stats=True, update_running=True,
                 momentum=0.1, eps=1e-5):
    return BatchNorm2d.apply(x, gamma, beta, running_mean=running_mean, running_var=running_var,
                             use_batch_stats=use_batch_stats, update_running=update_running,
                             momentum=momentum, eps=eps)


def zeros_like(a):
    return Tensor(np.zeros_like(as_tensor(a).data))


def ones_like(a):
    return Tensor(np.ones_like(as_tensor(a).data))
