"""
Dense rank-4 tensors and the primitive kernels every block is built from.

All kernels here are pure forward functions of ``Tensor4`` values. The
differentiable versions (which also accept tape nodes) live in
``dycaf.autodiff`` and call straight into these.
"""
import hashlib
import math
from collections import OrderedDict

import numpy as np

from dycaf.exceptions import (DuplicateParameterError, NonFiniteError,
                              ShapeError, UnknownParameterError)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
ACTIVATIONS = ('sigmoid', 'silu', 'relu')
POOL_MODES = ('avg', 'max')
SOFTMAX_AXES = ('channel', 'spatial')
RESAMPLE_MODES = ('up2', 'down2')
EW_OPS = ('add', 'mul')
DEPTHWISE_SIZES = (3, 7)


class Tensor4(object):
    """
    An immutable, finite, rank-4 array laid out row-major as (n, c, h, w).

    The underlying ndarray is marked read-only; every operation returns a new
    tensor, so values can be shared freely between threads.
    """
    __slots__ = ('_data',)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError("Tensor4 needs 4 dimensions, got shape %r" % (arr.shape,))
        if min(arr.shape) < 1:
            raise ShapeError("Tensor4 dimensions must all be >= 1, got %r" % (arr.shape,))
        if not np.isfinite(arr).all():
            raise NonFiniteError("Tensor4 contains NaN or Inf values")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def zeros(cls, shape, dtype=np.float64):
        return cls(np.zeros(shape, dtype=dtype))

    @classmethod
    def ones(cls, shape, dtype=np.float64):
        return cls(np.ones(shape, dtype=dtype))

    @classmethod
    def full(cls, shape, value, dtype=np.float64):
        return cls(np.full(shape, value, dtype=dtype))

    @classmethod
    def from_flat(cls, shape, flat, dtype=np.float64):
        flat = np.asarray(flat, dtype=dtype)
        if flat.size != int(np.prod(shape)):
            raise ShapeError("%d values cannot fill shape %r" % (flat.size, tuple(shape)))
        return cls(flat.reshape(shape))

    @property
    def data(self):
        return self._data

    @property
    def shape(self):
        return self._data.shape

    @property
    def n(self):
        return self._data.shape[0]

    @property
    def c(self):
        return self._data.shape[1]

    @property
    def h(self):
        return self._data.shape[2]

    @property
    def w(self):
        return self._data.shape[3]

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def size(self):
        return self._data.size

    def flat(self):
        return self._data.ravel()

    def item(self):
        if self.size != 1:
            raise ShapeError("item() needs a single-element tensor, got %r" % (self.shape,))
        return float(self._data.ravel()[0])

    def astype(self, dtype):
        return Tensor4(self._data, dtype=dtype)

    def identical(self, other):
        """
        Bit-for-bit equality, including dtype and shape.
        """
        return (self.shape == other.shape and self.dtype == other.dtype and
                self._data.tobytes() == other._data.tobytes())

    def checksum(self):
        return hashlib.sha256(self._data.tobytes()).hexdigest()

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __repr__(self):
        return "Tensor4(shape=%r, dtype=%s)" % (self.shape, self.dtype)


def as_array(value):
    if isinstance(value, Tensor4):
        return value.data
    return np.asarray(value)


def fit_shape(value, shape):
    """
    Broadcast ``value`` to ``shape``; a value holding exactly as many entries
    as the shape is laid out in order instead, so a flat bias fills
    (c, 1, 1, 1).
    """
    arr = as_array(value)
    if arr.shape != shape and arr.size == int(np.prod(shape)) and arr.size > 1:
        return arr.reshape(shape)
    return np.broadcast_to(arr, shape)


def _matrix(weights, name='weights'):
    arr = as_array(weights)
    if arr.ndim == 4:
        if arr.shape[2:] != (1, 1):
            raise ShapeError("%s must have singleton trailing dims, got %r" % (name, arr.shape))
        arr = arr.reshape(arr.shape[:2])
    if arr.ndim != 2:
        raise ShapeError("%s must be a matrix, got shape %r" % (name, arr.shape))
    return arr


def _vector(values, length, name='bias'):
    arr = as_array(values).reshape(-1)
    if arr.shape[0] != length:
        raise ShapeError("%s needs %d entries, got %d" % (name, length, arr.shape[0]))
    return arr


def _kernels(kernels):
    arr = as_array(kernels)
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise ShapeError("depthwise kernels must have shape (c, 1, k, k), got %r" % (arr.shape,))
        arr = arr[:, 0]
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ShapeError("depthwise kernels must be square, got shape %r" % (arr.shape,))
    return arr


def conv1x1(x, weights, bias=None):
    """
    Pointwise channel mixing: out[n,o,i,j] = bias[o] + sum_k weights[o,k] * x[n,k,i,j].
    """
    w = _matrix(weights)
    if w.shape[1] != x.c:
        raise ShapeError("conv1x1 weights expect %d input channels, tensor has %d" % (w.shape[1], x.c))
    out = np.einsum('ok,nkhw->nohw', w, x.data)
    if bias is not None:
        out = out + _vector(bias, w.shape[0])[None, :, None, None]
    return Tensor4(out)


def check_kernel_size(k):
    if k % 2 == 0:
        raise ShapeError("depthwise kernel size must be odd, got %d" % k)
    if k not in DEPTHWISE_SIZES:
        raise ShapeError("depthwise kernel size must be one of %r, got %d" % (DEPTHWISE_SIZES, k))


def pad_same(arr, k):
    p = (k - 1) // 2
    return np.pad(arr, ((0, 0), (0, 0), (p, p), (p, p)))


def depthwise_conv(x, kernels):
    """
    Per-channel k x k cross-correlation with zero padding, size preserving.
    """
    kern = _kernels(kernels)
    k = kern.shape[1]
    check_kernel_size(k)
    if kern.shape[0] != x.c:
        raise ShapeError("depthwise conv needs %d kernels, got %d" % (x.c, kern.shape[0]))
    xp = pad_same(x.data, k)
    h, w = x.h, x.w
    out = np.zeros(x.shape, dtype=np.result_type(x.data, kern))
    for a in range(k):
        for b in range(k):
            out += kern[None, :, a, b, None, None] * xp[:, :, a:a + h, b:b + w]
    return Tensor4(out)


def channel_pool(x, mode):
    if mode == 'avg':
        return Tensor4(x.data.mean(axis=1, keepdims=True))
    if mode == 'max':
        return Tensor4(x.data.max(axis=1, keepdims=True))
    raise ValueError("unknown pool mode %r" % (mode,))


def global_avg_pool(x):
    return Tensor4(x.data.mean(axis=(2, 3), keepdims=True))


def sigmoid_array(t):
    # exp(-softplus(-t)) never overflows
    return np.exp(-np.logaddexp(0, -t))


def activation(x, kind):
    t = x.data
    if kind == 'sigmoid':
        return Tensor4(sigmoid_array(t))
    if kind == 'silu':
        return Tensor4(t * sigmoid_array(t))
    if kind == 'relu':
        return Tensor4(np.maximum(t, 0))
    raise ValueError("unknown activation %r" % (kind,))


def softmax_array(arr, axis):
    axes = (1,) if axis == 'channel' else (2, 3)
    shifted = arr - arr.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axes, keepdims=True)


def softmax_axis(x, axis):
    if axis not in SOFTMAX_AXES:
        raise ValueError("unknown softmax axis %r" % (axis,))
    return Tensor4(softmax_array(x.data, axis))


def up2_array(arr):
    return arr.repeat(2, axis=2).repeat(2, axis=3)


def down2_array(arr):
    # pairwise sums keep down2(up2(x)) == x exact
    a = arr[:, :, 0::2, 0::2] + arr[:, :, 0::2, 1::2]
    b = arr[:, :, 1::2, 0::2] + arr[:, :, 1::2, 1::2]
    return (a + b) * 0.25


def resample(x, mode):
    if mode == 'up2':
        return Tensor4(up2_array(x.data))
    if mode == 'down2':
        if x.h % 2 or x.w % 2:
            raise ShapeError("down2 needs even spatial dims, got %dx%d" % (x.h, x.w))
        return Tensor4(down2_array(x.data))
    raise ValueError("unknown resample mode %r" % (mode,))


def check_concat(shapes):
    if not shapes:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = shapes[0]
    for shape in shapes[1:]:
        if (shape[0], shape[2], shape[3]) != (n, h, w):
            raise ShapeError("concat_channels needs matching (n, h, w), got %r and %r" % (shapes[0], shape))


def concat_channels(xs):
    check_concat([x.shape for x in xs])
    return Tensor4(np.concatenate([x.data for x in xs], axis=1))


def broadcast_shape(a, b):
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError("shapes %r and %r do not broadcast" % (tuple(a), tuple(b)))
    return tuple(out)


def ew(x, y, op):
    broadcast_shape(x.shape, y.shape)
    if op == 'add':
        return Tensor4(x.data + y.data)
    if op == 'mul':
        return Tensor4(x.data * y.data)
    raise ValueError("unknown element-wise op %r" % (op,))


# Auxiliary primitives the losses and the class-wise blocks are assembled from.

def slice_channels(x, start, stop):
    if not 0 <= start < stop <= x.c:
        raise ShapeError("channel slice [%d:%d] out of range for %d channels" % (start, stop, x.c))
    return Tensor4(x.data[:, start:stop])


def reduce_sum(x):
    return Tensor4(np.full((1, 1, 1, 1), x.data.sum(), dtype=x.dtype))


def scale(x, factor):
    return Tensor4(x.data * factor)


def shift(x, offset):
    return Tensor4(x.data + offset)


def log_clamped(x, floor):
    return Tensor4(np.log(np.maximum(x.data, floor)))


def l2_norm(x):
    return Tensor4(np.full((1, 1, 1, 1), np.sqrt(np.sum(x.data * x.data)), dtype=x.dtype))


def name_seed(seed, name):
    digest = hashlib.sha256(name.encode('utf-8')).digest()
    return [int(seed), int.from_bytes(digest[:8], 'little')]


class ParamStore(object):
    """
    Named learnable tensors. Vectors and matrices are stored as Tensor4 with
    singleton trailing dims: a conv1x1 weight is (c_out, c_in, 1, 1), a bias
    is (c_out, 1, 1, 1) and depthwise kernels are (c, 1, k, k).

    Each tensor is drawn from its own generator seeded by the store seed and
    the tensor name, uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    """
    def __init__(self, seed=0, dtype=np.float64):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._entries = OrderedDict()

    def register(self, name, shape, fan_in=None, init='uniform', value=None):
        if name in self._entries:
            raise DuplicateParameterError("parameter %r is already registered" % name)
        shape = tuple(int(d) for d in shape)
        while len(shape) < 4:
            shape = shape + (1,)
        if value is not None:
            arr = fit_shape(value, shape)
        elif init == 'zeros':
            arr = np.zeros(shape)
        elif init == 'ones':
            arr = np.ones(shape)
        elif init == 'uniform':
            if fan_in is None:
                fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            rng = np.random.default_rng(name_seed(self.seed, name))
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError("unknown init %r" % (init,))
        tensor = Tensor4(arr, dtype=self.dtype)
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name):
        try:
            return self._entries[name]
        except KeyError:
            raise UnknownParameterError("unknown parameter %r" % name)

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self, prefix=None):
        if prefix is None:
            return list(self._entries)
        return [name for name in self._entries if name == prefix or name.startswith(prefix + '.')]

    def items(self):
        return self._entries.items()

    def set(self, name, value):
        """
        Replace a registered tensor with a new value of the same shape.
        """
        current = self[name]
        tensor = Tensor4(fit_shape(value, current.shape), dtype=self.dtype)
        self._entries[name] = tensor
        return tensor

    def copy(self):
        other = ParamStore(self.seed, self.dtype)
        other._entries = OrderedDict(self._entries)
        return other

    def perturbed(self, name, index, delta):
        """
        A copy with one scalar entry of ``name`` moved by ``delta``.
        """
        other = self.copy()
        arr = np.array(self[name].data)
        arr.reshape(-1)[index] += delta
        other._entries[name] = Tensor4(arr, dtype=self.dtype)
        return other

    def count(self, prefix=None):
        return sum(self._entries[name].size for name in self.names(prefix))

    def __repr__(self):
        return "ParamStore(seed=%d, tensors=%d, scalars=%d)" % (self.seed, len(self), self.count())
