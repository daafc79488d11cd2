"""Dense tensor / image data model and the CVDF binary tensor format.

CVDF layout (all integers little-endian)::

    offset  size        field
    0       4           magic b"CVDF"
    4       2           version (u16, = 1)
    6       1           dtype code (u8, 0 = float32)
    7       1           rank (u8)
    8       4 * rank    dims (u32 each)
    ...     4 * prod    payload, float32 little-endian, row-major
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

MAGIC = b"CVDF"
VERSION = 1
DTYPE_F32 = 0
_PREFIX = struct.Struct("<4sHBB")
_U32_MAX = 2**32 - 1


class CVDFError(ValueError):
    """Base class for malformed CVDF files."""


class BadMagic(CVDFError):
    pass


class UnsupportedVersion(CVDFError):
    pass


class UnsupportedDtype(UnsupportedVersion):
    pass


class TruncatedPayload(CVDFError):
    pass


class TrailingBytes(CVDFError):
    pass


class InvalidDims(CVDFError):
    pass


class DimensionMismatch(ValueError):
    """Operands have incompatible shapes."""


@dataclass(frozen=True, eq=False)
class Tensor:
    """Row-major float32 array with explicit dims."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype="<f4")
        if arr.ndim < 1 or any(d < 1 for d in arr.shape):
            raise InvalidDims(f"tensor dims must be >= 1 with rank >= 1, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, dims, values) -> "Tensor":
        dims = tuple(int(d) for d in dims)
        flat = np.asarray(values, dtype="<f4").ravel()
        if flat.size != int(np.prod(dims, dtype=np.int64)):
            raise InvalidDims(f"{flat.size} values do not fill dims {dims}")
        return cls(flat.reshape(dims))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.dims == other.dims and self.data.tobytes() == other.data.tobytes()

    def __hash__(self):
        return hash((self.dims, self.data.tobytes()))


def encode_tensor(t: Tensor | np.ndarray) -> bytes:
    if not isinstance(t, Tensor):
        t = Tensor(np.asarray(t))
    dims = t.dims
    if len(dims) > 255:
        raise InvalidDims(f"rank {len(dims)} does not fit in u8")
    if any(d > _U32_MAX for d in dims):
        raise InvalidDims(f"dims {dims} overflow u32")
    header = _PREFIX.pack(MAGIC, VERSION, DTYPE_F32, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    return header + t.data.tobytes(order="C")


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < _PREFIX.size:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise BadMagic(f"bad magic {buf[:4]!r}")
        raise TruncatedPayload(f"header truncated at {len(buf)} bytes")
    magic, version, dtype, rank = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported CVDF version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtype(f"unsupported dtype code {dtype}")
    if rank < 1:
        raise InvalidDims("rank must be >= 1")
    dims_end = _PREFIX.size + 4 * rank
    if len(buf) < dims_end:
        raise TruncatedPayload("dims block truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, _PREFIX.size)
    if any(d == 0 for d in dims):
        raise InvalidDims(f"zero-sized dim in {dims}")
    nbytes = 4 * int(np.prod(dims, dtype=object))
    payload = len(buf) - dims_end
    if payload < nbytes:
        raise TruncatedPayload(f"payload has {payload} bytes, dims {dims} need {nbytes}")
    if payload > nbytes:
        raise TrailingBytes(f"{payload - nbytes} unexpected bytes after payload")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=dims_end)
    return Tensor(arr.reshape(dims))


def write_tensor(t: Tensor | np.ndarray, path: str | os.PathLike) -> None:
    """Write ``t`` to ``path`` in CVDF format."""
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path: str | os.PathLike) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


@dataclass(frozen=True, eq=False)
class Image:
    """H x W x C image with values in [0, 1], C in {1, 3}.

    Pixels are held in float64 for the numerics; they are stored as float32
    when written to CVDF.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise DimensionMismatch(f"image must be HxWx1 or HxWx3, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise DimensionMismatch("image must be non-empty")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image pixels must lie in [0, 1]")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def to_tensor(self) -> Tensor:
        return Tensor(self.pixels)

    @classmethod
    def from_tensor(cls, t: Tensor) -> "Image":
        if len(t.dims) != 3:
            raise DimensionMismatch(f"images serialize as rank-3 tensors, got rank {len(t.dims)}")
        return cls(t.data.astype(np.float64))

    def luma(self) -> np.ndarray:
        """Single-channel float64 view (ITU-R BT.601 weights for RGB)."""
        if self.channels == 1:
            return self.pixels[:, :, 0]
        return self.pixels @ np.array([0.299, 0.587, 0.114])


class DecodeError(IOError):
    def __init__(self, path, reason):
        super().__init__(f"cannot decode image {path}: {reason}")
        self.path = Path(path)


def load_image(path: str | os.PathLike) -> Image:
    """Decode an 8-bit PNG/JPEG; values are mapped to [0, 1] by /255."""
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("L", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
            elif im.mode in ("I;16", "I;16B", "I"):
                raise DecodeError(path, f"16-bit image mode {im.mode} is not an 8-bit image")
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except DecodeError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(path, exc) from exc
    return Image(arr / 255.0)


def save_image(img: Image, path: str | os.PathLike) -> None:
    arr = np.rint(img.pixels * 255.0).astype(np.uint8)
    if img.channels == 1:
        PILImage.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        PILImage.fromarray(arr, mode="RGB").save(path)
