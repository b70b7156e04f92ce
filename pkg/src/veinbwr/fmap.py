"""Dense feature-map container, bilinear sampling, conv/pool kernels and file I/O.

Coordinates follow the pixel-center convention: ``x = 0`` is the center of
column 0, ``y = 0`` the center of row 0. Samples outside the map clamp to the
border (replicate padding).
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

FMAP_MAGIC = b"FMAP1\x00"
_HEADER = struct.Struct("<III")
# refuse headers that would allocate more than 1 GiB of floats
_MAX_ELEMENTS = 1 << 28


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """A (C, H, W) float32 tensor, channel-major then row-major."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 3:
            raise DomainError(f"feature map must be 3-D (C, H, W), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("feature map contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __repr__(self):
        return f"FeatureMap(C={self.channels}, H={self.height}, W={self.width})"


@dataclass(frozen=True, eq=False)
class Image:
    """8-bit grayscale image, row-major (H, W)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DomainError(f"image must be 2-D, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255):
                raise DomainError("image values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def as_fmap(self) -> FeatureMap:
        return FeatureMap(self.data[None].astype(np.float32))


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """Weights (out, in, kh, kw) and bias (out,) of a 2-D cross-correlation."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        b = np.array(self.bias, dtype=np.float64, copy=True).reshape(-1)
        if w.ndim != 4:
            raise DomainError(f"conv weights must be 4-D (out, in, kh, kw), got {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise DomainError(f"bias length {b.shape[0]} != out_channels {w.shape[0]}")
        if self.stride < 1 or self.padding < 0:
            raise DomainError("stride must be >= 1 and padding >= 0")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise DomainError("conv parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]


def sample_bilinear(data: np.ndarray, xs, ys) -> np.ndarray:
    """Vectorized clamped bilinear sampling of a (C, H, W) array.

    Returns an array of shape ``(C,) + xs.shape`` in float64.
    """
    data = np.asarray(data)
    _, h, w = data.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    d = data.astype(np.float64, copy=False)
    top = d[:, y0, x0] * (1.0 - fx) + d[:, y0, x1] * fx
    bot = d[:, y1, x0] * (1.0 - fx) + d[:, y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def bilinear_sample(fmap: FeatureMap, channel: int, x: float, y: float) -> float:
    if not 0 <= channel < fmap.channels:
        raise DomainError(f"channel {channel} out of range [0, {fmap.channels})")
    if not (np.isfinite(x) and np.isfinite(y)):
        raise DomainError("sample coordinates must be finite")
    if fmap.height == 0 or fmap.width == 0:
        raise DomainError("cannot sample an empty map")
    out = sample_bilinear(fmap.data[channel : channel + 1], np.float64(x), np.float64(y))
    return float(out[0])


def conv2d(fmap: FeatureMap, spec: ConvSpec) -> FeatureMap:
    """Direct 2-D cross-correlation plus bias, accumulated in float64."""
    if fmap.channels != spec.in_channels:
        raise DomainError(f"input has {fmap.channels} channels, conv expects {spec.in_channels}")
    kh, kw, st, pad = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    out_h = (fmap.height + 2 * pad - kh) // st + 1
    out_w = (fmap.width + 2 * pad - kw) // st + 1
    if out_h <= 0 or out_w <= 0:
        raise DomainError(f"conv output would be {out_h}x{out_w}")
    x = np.pad(fmap.data.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : (out_h - 1) * st + 1 : st, : (out_w - 1) * st + 1 : st]
    # win: (C_in, out_h, out_w, kh, kw)
    out = np.tensordot(spec.weights, win, axes=([1, 2, 3], [0, 3, 4]))
    out += spec.bias[:, None, None]
    return FeatureMap(out.astype(np.float32))


def avg_pool(fmap: FeatureMap, window: int, stride: int) -> FeatureMap:
    """Average pooling; windows overrunning the border are dropped."""
    if window < 1 or stride < 1:
        raise DomainError("window and stride must be >= 1")
    if window > min(fmap.height, fmap.width):
        raise DomainError(f"window {window} larger than map {fmap.height}x{fmap.width}")
    win = np.lib.stride_tricks.sliding_window_view(
        fmap.data.astype(np.float64), (window, window), axis=(1, 2)
    )[:, ::stride, ::stride]
    return FeatureMap(win.mean(axis=(3, 4)).astype(np.float32))


def encode_fmap(fmap: FeatureMap) -> bytes:
    c, h, w = fmap.shape
    return FMAP_MAGIC + _HEADER.pack(c, h, w) + fmap.data.astype("<f4").tobytes()


def decode_fmap(buf: bytes) -> FeatureMap:
    head = len(FMAP_MAGIC) + _HEADER.size
    if len(buf) < head:
        raise FormatError(f"FMAP header truncated ({len(buf)} bytes)")
    if buf[: len(FMAP_MAGIC)] != FMAP_MAGIC:
        raise FormatError("bad FMAP magic")
    c, h, w = _HEADER.unpack_from(buf, len(FMAP_MAGIC))
    n = c * h * w
    if n > _MAX_ELEMENTS:
        raise FormatError(f"FMAP dims {c}x{h}x{w} overflow the element limit")
    expected = head + 4 * n
    if len(buf) != expected:
        raise FormatError(f"FMAP payload is {len(buf) - head} bytes, expected {4 * n}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=head).reshape(c, h, w)
    try:
        return FeatureMap(data)
    except DomainError as exc:
        raise FormatError(str(exc)) from exc


def write_fmap(path, fmap: FeatureMap) -> None:
    Path(path).write_bytes(encode_fmap(fmap))


def read_fmap(path) -> FeatureMap:
    return decode_fmap(Path(path).read_bytes())


def encode_pgm(image: Image) -> bytes:
    return b"P5\n%d %d\n255\n" % (image.width, image.height) + image.data.tobytes()


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def decode_pgm(buf: bytes) -> Image:
    pos = 0
    fields = []
    for _ in range(4):
        m = _PGM_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError("malformed PGM header") from exc
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    if len(buf) - pos != w * h:
        raise FormatError(f"PGM payload is {len(buf) - pos} bytes, expected {w * h}")
    return Image(np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(h, w))


def write_pgm(path, image: Image) -> None:
    Path(path).write_bytes(encode_pgm(image))


def read_pgm(path) -> Image:
    return decode_pgm(Path(path).read_bytes())
