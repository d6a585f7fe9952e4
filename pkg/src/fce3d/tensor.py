"""Dense rank-3 arrays, the FCT1 tensor file format, and bilinear sampling.

A :class:`Tensor3` is a ``(channels, height, width)`` float64 array. Files
store the same layout as little-endian float32 behind a 16-byte header::

    b"FCT1" | uint32 channels | uint32 height | uint32 width | float32 data...
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"FCT1"
_HEADER = struct.Struct("<4sIII")
MAX_ELEMENTS = 2**32 - 1


class TensorFormatError(ValueError):
    """Base class for unreadable or unwritable tensor files."""


class TensorHeaderError(TensorFormatError):
    pass


class TensorTruncatedError(TensorFormatError):
    pass


class TensorTrailingDataError(TensorFormatError):
    pass


class TensorOverflowError(TensorFormatError):
    pass


class NonFiniteTensorError(TensorFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Tensor3:
    """Immutable ``(C, H, W)`` array of float64 values."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"Tensor3 needs a rank-3 array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteTensorError("Tensor3 values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Tensor3):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None

    def sample(self, u, v):
        return bilinear_sample(self, u, v)


def bilinear_sample(tensor, u, v):
    """Samples every channel of ``tensor`` at continuous pixel coordinates.

    Args:
      tensor: a :class:`Tensor3` or a ``(C, H, W)`` array.
      u: column coordinate(s); scalar or array of shape ``[N]``.
      v: row coordinate(s), same shape as ``u``.

    Returns:
      ``[C]`` for scalar coordinates, otherwise ``[N, C]``. Coordinates outside
      the map are clamped to the border cells.
    """
    fmap = tensor.data if isinstance(tensor, Tensor3) else np.asarray(tensor, dtype=np.float64)
    _, h, w = fmap.shape
    if h == 0 or w == 0 or fmap.shape[0] == 0:
        raise ValueError("cannot sample an empty map")
    scalar = np.ndim(u) == 0
    u = np.clip(np.atleast_1d(np.asarray(u, dtype=np.float64)), 0.0, w - 1)
    v = np.clip(np.atleast_1d(np.asarray(v, dtype=np.float64)), 0.0, h - 1)

    u0 = np.minimum(np.floor(u).astype(np.intp), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.intp), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    du = (u - u0)[:, None]
    dv = (v - v0)[:, None]

    f00 = fmap[:, v0, u0].T
    f01 = fmap[:, v0, u1].T
    f10 = fmap[:, v1, u0].T
    f11 = fmap[:, v1, u1].T
    top = f00 + (f01 - f00) * du
    bottom = f10 + (f11 - f10) * du
    out = top + (bottom - top) * dv
    return out[0] if scalar else out


def _atomic_write_bytes(path, payload):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def encode_tensor(tensor):
    arr = tensor.data if isinstance(tensor, Tensor3) else np.asarray(tensor, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected a rank-3 array, got shape {arr.shape}")
    c, h, w = arr.shape
    if max(c, h, w) > 0xFFFFFFFF or c * h * w > MAX_ELEMENTS:
        raise TensorOverflowError(f"dimensions {arr.shape} do not fit the FCT1 header")
    body = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, c, h, w) + body


def decode_tensor(payload):
    if len(payload) < _HEADER.size:
        raise TensorHeaderError(f"file has {len(payload)} bytes, header needs {_HEADER.size}")
    magic, c, h, w = _HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise TensorHeaderError(f"bad magic {magic!r}, expected {MAGIC!r}")
    count = c * h * w
    if count > MAX_ELEMENTS:
        raise TensorOverflowError(f"declared dimensions {c}x{h}x{w} overflow the element limit")
    have = len(payload) - _HEADER.size
    need = 4 * count
    if have < need:
        raise TensorTruncatedError(
            f"declared {c}x{h}x{w} = {count} values but payload holds {have // 4}")
    if have > need:
        raise TensorTrailingDataError(f"{have - need} trailing bytes after tensor payload")
    arr = np.frombuffer(payload, dtype="<f4", count=count, offset=_HEADER.size)
    return Tensor3(arr.astype(np.float64).reshape(c, h, w))


def write_tensor(path, tensor):
    """Writes ``tensor`` as an FCT1 file (values are rounded to float32)."""
    _atomic_write_bytes(path, encode_tensor(tensor))


def read_tensor(path):
    with open(path, "rb") as f:
        return decode_tensor(f.read())
