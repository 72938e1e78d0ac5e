"""Raster types and file I/O.

Conventions used throughout the package:

* arrays are row-major with a top-left origin; a pixel coordinate written
  ``(x, y)`` is ``(column, row)`` and indexes arrays as ``a[y, x]``;
* depth is in meters and ``0.0`` marks an invalid pixel (never NaN);
* on disk depth is a 16-bit P5 PGM in millimeters, masks are 8-bit P5 PGM
  (255 = sample), RGB is 8-bit P6 PPM and float maps are grayscale PFM.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass

import numpy as np

from .exceptions import FormatError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

MAX_DEPTH_MM = 65535


def _frozen(array, dtype):
    a = np.array(array, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DepthMap:
    """H x W metric depth; 0.0 marks invalid pixels."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values, np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ShapeError(f"depth map must be a non-empty 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            y, x = np.argwhere(~np.isfinite(v))[0]
            raise ValidationError(f"depth map has a non-finite value at (x={x}, y={y})")
        if np.any(v < 0):
            y, x = np.argwhere(v < 0)[0]
            raise ValidationError(f"depth map has a negative value at (x={x}, y={y})")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def valid(self):
        return self.values > 0


@dataclass(frozen=True, eq=False)
class RgbImage:
    """H x W x 3 intensities in [0, 1]."""

    channels: np.ndarray

    def __post_init__(self):
        c = _frozen(self.channels, np.float64)
        if c.ndim != 3 or c.shape[2] != 3 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ShapeError(f"RGB image must have shape (H, W, 3), got {c.shape}")
        if not np.all(np.isfinite(c)) or c.min() < 0 or c.max() > 1:
            raise ValidationError("RGB intensities must be finite and lie in [0, 1]")
        object.__setattr__(self, "channels", c)

    @property
    def shape(self):
        return self.channels.shape[:2]

    @property
    def height(self):
        return self.channels.shape[0]

    @property
    def width(self):
        return self.channels.shape[1]

    def gray(self):
        """Rec. 601 luma."""
        return self.channels @ np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class PatternMask:
    """H x W binary mask of sparse sample locations."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2 or b.shape[0] < 1 or b.shape[1] < 1:
            raise ShapeError(f"mask must be a non-empty 2-D array, got shape {b.shape}")
        object.__setattr__(self, "bits", _frozen(b != 0, bool))

    @property
    def shape(self):
        return self.bits.shape

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def count(self):
        return int(self.bits.sum())

    def points(self):
        """Set bits as an (n, 2) array of (x, y), in row-major order."""
        ys, xs = np.nonzero(self.bits)
        return np.stack([xs, ys], axis=1)


@dataclass(frozen=True, eq=False)
class SparseInput:
    """The two network input maps: NN-filled depth and distance prior."""

    s1: np.ndarray
    s2: np.ndarray

    def __post_init__(self):
        s1 = _frozen(self.s1, np.float64)
        s2 = _frozen(self.s2, np.float64)
        if s1.ndim != 2 or s1.shape != s2.shape:
            raise ShapeError(f"s1 {s1.shape} and s2 {s2.shape} must be equal 2-D shapes")
        object.__setattr__(self, "s1", s1)
        object.__setattr__(self, "s2", s2)

    @property
    def shape(self):
        return self.s1.shape

    def stacked(self):
        """(H, W, 2) concatenation of s1 and s2."""
        return np.stack([self.s1, self.s2], axis=-1)


def require_same_shape(**maps) -> tuple[int, int]:
    """Raise ShapeError unless every keyword map has the same (H, W)."""
    shapes = {name: tuple(m.shape[:2]) for name, m in maps.items()}
    first = next(iter(shapes.values()))
    if any(s != first for s in shapes.values()):
        desc = ", ".join(f"{k} {v[0]}x{v[1]}" for k, v in shapes.items())
        raise ShapeError(f"dimension mismatch: {desc}")
    return first


# ---------------------------------------------------------------------------
# PNM / PFM


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(buf: bytes, count: int, path) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens (comments allowed).

    Returns the tokens and the payload offset (one whitespace byte after the
    last token, as the netpbm formats require).
    """
    tokens, pos = [], 0
    for field_name in ("magic", "width", "height", "maxval")[:count]:
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"{path}: header ends before the {field_name} field")
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in b" \t\r\n":
        raise FormatError(f"{path}: missing whitespace after header")
    return tokens, pos + 1


def _header_int(token: bytes, field_name: str, path) -> int:
    try:
        value = int(token)
    except ValueError:
        raise FormatError(f"{path}: {field_name} field {token!r} is not an integer") from None
    if value < 1:
        raise FormatError(f"{path}: {field_name} field must be positive, got {value}")
    return value


def _read_pnm(path, magic: bytes, maxval: int, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 2 or buf[:2] != magic:
        raise FormatError(f"{path}: magic field is {buf[:2]!r}, expected {magic!r}")
    tokens, offset = _parse_header(buf, 4, path)
    w = _header_int(tokens[1], "width", path)
    h = _header_int(tokens[2], "height", path)
    mv = _header_int(tokens[3], "maxval", path)
    if mv != maxval:
        raise FormatError(f"{path}: maxval field is {mv}, expected {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = h * w * channels * dtype.itemsize
    payload = buf[offset:offset + expected]
    if len(payload) < expected:
        raise FormatError(f"{path}: payload truncated, expected {expected} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype)
    shape = (h, w) if channels == 1 else (h, w, channels)
    return data.reshape(shape)


def _write_bytes(path, header: bytes, payload: bytes):
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_depth(path) -> DepthMap:
    """Read a 16-bit P5 PGM holding millimeters (0 = invalid)."""
    mm = _read_pnm(path, b"P5", MAX_DEPTH_MM, 1)
    return DepthMap(mm.astype(np.float64) / 1000.0)


def depth_to_mm(values) -> tuple[np.ndarray, int]:
    """Quantise meters to millimeters, rounding halves up.

    Products within 1e-6 mm of a half count as halves so that decimal inputs
    like 1.2345 m round as written. Returns the samples and the clamp count.
    """
    mm = np.floor(np.round(np.asarray(values, dtype=np.float64) * 1000.0, 6) + 0.5)
    over = mm > MAX_DEPTH_MM
    clamped = int(over.sum())
    mm[over] = MAX_DEPTH_MM
    return mm.astype(np.uint16), clamped


def write_depth(depth: DepthMap, path) -> None:
    """Write a 16-bit P5 PGM in millimeters; depths >= 65.5355 m are clamped."""
    mm, clamped = depth_to_mm(depth.values)
    if clamped:
        logger.warning("write_depth: %d pixel(s) clamped to 65535 mm in %s", clamped, path)
    h, w = mm.shape
    _write_bytes(path, b"P5\n%d %d\n65535\n" % (w, h), mm.astype(">u2").tobytes())


def read_mask(path) -> PatternMask:
    return PatternMask(_read_pnm(path, b"P5", 255, 1) > 0)


def write_mask(mask: PatternMask, path) -> None:
    h, w = mask.shape
    data = np.where(mask.bits, 255, 0).astype(np.uint8)
    _write_bytes(path, b"P5\n%d %d\n255\n" % (w, h), data.tobytes())


def read_rgb(path) -> RgbImage:
    """Read an 8-bit P6 PPM, scaling intensities to [0, 1]."""
    return RgbImage(_read_pnm(path, b"P6", 255, 3).astype(np.float64) / 255.0)


def write_rgb(image: RgbImage, path) -> None:
    h, w = image.shape
    data = np.floor(image.channels * 255.0 + 0.5).astype(np.uint8)
    _write_bytes(path, b"P6\n%d %d\n255\n" % (w, h), data.tobytes())


def write_float_map(values, path) -> None:
    """Write a grayscale little-endian PFM (scale -1.0, rows bottom-to-top)."""
    a = np.asarray(values)
    if a.ndim != 2:
        raise ShapeError(f"float map must be 2-D, got shape {a.shape}")
    bad = ~np.isfinite(a)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise ValidationError(f"float map has a non-finite value at ({x}, {y})")
    h, w = a.shape
    payload = np.ascontiguousarray(a[::-1], dtype="<f4").tobytes()
    _write_bytes(path, b"Pf\n%d %d\n-1.0\n" % (w, h), payload)


def read_float_map(path) -> np.ndarray:
    """Read a grayscale PFM into a float32 (H, W) array, top row first."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"Pf":
        raise FormatError(f"{path}: magic field is {buf[:2]!r}, expected b'Pf'")
    tokens, offset = _parse_header(buf, 4, path)
    w = _header_int(tokens[1], "width", path)
    h = _header_int(tokens[2], "height", path)
    try:
        scale = float(tokens[3])
    except ValueError:
        raise FormatError(f"{path}: scale field {tokens[3]!r} is not a number") from None
    if scale == 0:
        raise FormatError(f"{path}: scale field must be nonzero")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    expected = h * w * 4
    payload = buf[offset:offset + expected]
    if len(payload) < expected:
        raise FormatError(f"{path}: payload truncated, expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w)[::-1].astype(np.float32)


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
