"""
The DT4 tensor file format:

    b'DT4\\0'                    magic
    4 x uint64 little-endian     n, c, h, w
    1 byte                       dtype code, 4 = float32, 8 = float64
    n*c*h*w elements             little-endian, row-major
"""
import struct

import numpy as np

from dycaf.exceptions import (BadMagicError, DimensionMismatchError,
                              TruncatedPayloadError, UnsupportedDtypeError)
from dycaf.tensor import Tensor4

MAGIC = b'DT4\0'
HEADER = struct.Struct('<4s4QB')
DTYPE_CODES = {4: np.dtype('<f4'), 8: np.dtype('<f8')}


def dtype_code(dtype):
    for code, dt in DTYPE_CODES.items():
        if np.dtype(dtype).newbyteorder('<') == dt:
            return code
    raise UnsupportedDtypeError("DT4 stores float32 or float64, not %s" % np.dtype(dtype))


def encode(tensor):
    code = dtype_code(tensor.dtype)
    header = HEADER.pack(MAGIC, *(list(tensor.shape) + [code]))
    return header + np.ascontiguousarray(tensor.data, dtype=DTYPE_CODES[code]).tobytes()


def decode(payload):
    if len(payload) < len(MAGIC) or payload[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not a DT4 tensor: magic is %r" % bytes(payload[:len(MAGIC)]))
    if len(payload) < HEADER.size:
        raise TruncatedPayloadError("DT4 header needs %d bytes, got %d" % (HEADER.size, len(payload)))
    _, n, c, h, w, code = HEADER.unpack_from(payload)
    if code not in DTYPE_CODES:
        raise UnsupportedDtypeError("unknown DT4 dtype code %d" % code)
    if 0 in (n, c, h, w):
        raise DimensionMismatchError("DT4 dims must all be positive, got %r" % ((n, c, h, w),))
    dtype = DTYPE_CODES[code]
    expected = n * c * h * w * dtype.itemsize
    body = len(payload) - HEADER.size
    if body < expected:
        raise TruncatedPayloadError("DT4 header declares %d elements but the payload holds %d"
                                    % (n * c * h * w, body // dtype.itemsize))
    if body > expected:
        raise DimensionMismatchError("DT4 payload has %d bytes beyond the declared %r tensor"
                                     % (body - expected, (n, c, h, w)))
    data = np.frombuffer(payload, dtype=dtype, count=n * c * h * w, offset=HEADER.size)
    return Tensor4(data.reshape(n, c, h, w).astype(dtype.newbyteorder('='), copy=False))


def write_tensor(path, tensor):
    with open(path, 'wb') as fh:
        fh.write(encode(tensor))
    return path


def read_tensor(path):
    with open(path, 'rb') as fh:
        return decode(fh.read())


def tensor_io(path, tensor=None):
    """
    Write ``tensor`` to ``path`` when one is given, otherwise read it back.
    """
    if tensor is not None:
        return write_tensor(path, tensor)
    return read_tensor(path)
