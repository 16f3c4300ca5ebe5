"""Dense tensor primitives shared by every other module.

Conventions used throughout the package:

- single-channel grids are 2D float64 arrays of shape (H, W); multi-channel
  tensors are (C, H, W), channel-major
- convolution is correlation-style: out[i, j] = sum_{m,l} K(m, l) * grid(i+m, j+l)
  where the kernel offset (m, l) ranges over [-r, r] and is stored at K[m+r, l+r]
- all in-memory math is float64; 32-bit floats appear only in the on-disk
  container and on the wire

The on-disk container ("TPAT") is:

    magic "TPAT" | version u32 LE = 1 | C u32 LE | H u32 LE | W u32 LE |
    C*H*W float32 LE values, row-major within channel, channel-major

Round-trips are bit-exact at 32-bit precision.
"""

from __future__ import annotations

import io
import struct
import zlib
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy import ndimage

TPAT_MAGIC = b"TPAT"
TPAT_VERSION = 1
# refuse headers whose payload would exceed 1 GiB of float32 values
MAX_TENSOR_ELEMENTS = 1 << 28

_HEADER = struct.Struct("<IIII")


class BoundaryMode(str, Enum):
    """How convolution treats reads past the grid edge."""

    PERIODIC = "periodic"  # indices wrap (torus)
    ZERO_PAD = "zero"      # out-of-range cells read as 0


class TensorFormatError(ValueError):
    """Malformed TPAT container."""


class BadMagicError(TensorFormatError):
    """Leading bytes are not the TPAT magic."""


class TruncatedPayloadError(TensorFormatError):
    """Header promises more payload than the file contains."""


class DimensionOverflowError(TensorFormatError):
    """Header dimensions exceed the supported tensor size."""


class PngDecodeError(ValueError):
    """Byte string could not be decoded as a PNG image."""


def seeded_rng(seed: int, stream: str = "") -> np.random.Generator:
    """Deterministic generator for a (seed, named stream) pair.

    Named streams keep subsystems (data synthesis, optimizer, init maps)
    decorrelated while everything still flows from one user-facing seed.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    key = zlib.crc32(stream.encode("utf-8"))
    return np.random.default_rng([int(seed), key])


def _as_mode(mode) -> BoundaryMode:
    if isinstance(mode, BoundaryMode):
        return mode
    return BoundaryMode(str(mode))


def convolve2d(grid, kernel, mode=BoundaryMode.PERIODIC) -> np.ndarray:
    """Correlation-style 2D convolution with explicit boundary handling.

    out[i, j] = sum_{m,l} kernel[m+r, l+r] * grid[i+m, j+l], the kernel offsets
    centered on its middle element. The kernel must be odd-sized in both
    dimensions and no larger than the grid.
    """
    grid = np.asarray(grid, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    if grid.ndim != 2 or kernel.ndim != 2:
        raise ValueError("convolve2d expects 2D grid and 2D kernel")
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dimensions must be odd, got {kh}x{kw}")
    if kh > grid.shape[0] or kw > grid.shape[1]:
        raise ValueError(
            f"kernel {kh}x{kw} larger than grid {grid.shape[0]}x{grid.shape[1]}"
        )
    nd_mode = "wrap" if _as_mode(mode) is BoundaryMode.PERIODIC else "constant"
    return ndimage.correlate(grid, kernel, mode=nd_mode, cval=0.0)


def apply_perturbation(image, pattern, budget: float) -> np.ndarray:
    """Add a perturbation to an image and clip the result to [0, 255].

    A pattern whose entries are exactly +-1 is scaled by `budget` first;
    anything else is treated as pre-scaled and must already satisfy
    max|pattern| <= budget. `image` may carry a leading batch axis.
    """
    image = np.asarray(image, dtype=float)
    pattern = np.asarray(pattern, dtype=float)
    if budget <= 0:
        raise ValueError("budget must be positive")
    if image.shape[-pattern.ndim:] != pattern.shape or image.ndim > pattern.ndim + 1:
        raise ValueError(
            f"shape mismatch: image {image.shape} vs pattern {pattern.shape}"
        )
    if np.all(np.abs(pattern) == 1.0):
        delta = budget * pattern
    elif np.max(np.abs(pattern)) <= budget * (1 + 1e-12):
        delta = pattern
    else:
        raise ValueError("pattern is neither +-1 valued nor within the budget")
    return np.clip(image + delta, 0.0, 255.0)


def to_f32_bytes(tensor) -> bytes:
    """Raw little-endian float32 bytes, C order. This is the wire precision."""
    return np.ascontiguousarray(tensor, dtype="<f4").tobytes()


def tensor_to_bytes(tensor) -> bytes:
    """Serialize a (C, H, W) or (H, W) tensor into the TPAT container."""
    arr = np.asarray(tensor)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3:
        raise ValueError(f"expected 2D or 3D tensor, got {arr.ndim}D")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor entries must be finite")
    c, h, w = arr.shape
    if arr.size > MAX_TENSOR_ELEMENTS:
        raise DimensionOverflowError(f"tensor too large: {arr.shape}")
    return TPAT_MAGIC + _HEADER.pack(TPAT_VERSION, c, h, w) + to_f32_bytes(arr)


def tensor_from_bytes(data: bytes) -> np.ndarray:
    """Parse a TPAT container. Returns float64 of shape (C, H, W)."""
    if len(data) < 4 or data[:4] != TPAT_MAGIC:
        raise BadMagicError("bad magic: not a TPAT tensor")
    if len(data) < 4 + _HEADER.size:
        raise TruncatedPayloadError("truncated header")
    version, c, h, w = _HEADER.unpack_from(data, 4)
    if version != TPAT_VERSION:
        raise TensorFormatError(f"unsupported TPAT version {version}")
    if min(c, h, w) == 0:
        raise TensorFormatError("zero dimension in header")
    n = int(c) * int(h) * int(w)
    if n > MAX_TENSOR_ELEMENTS:
        raise DimensionOverflowError(f"header dimensions overflow: {(c, h, w)}")
    payload = data[4 + _HEADER.size:]
    if len(payload) < 4 * n:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, header promises {4 * n}"
        )
    if len(payload) > 4 * n:
        raise TensorFormatError("trailing bytes after payload")
    flat = np.frombuffer(payload, dtype="<f4", count=n)
    return flat.astype(np.float64).reshape(int(c), int(h), int(w))


def save_tensor(tensor, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(tensor))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def pattern_to_png(pattern) -> bytes:
    """Encode a +-1 pattern as an 8-bit RGB PNG (-1 -> 0, +1 -> 255)."""
    arr = np.asarray(pattern, dtype=float)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected (H,W), (1,H,W) or (3,H,W) pattern, got {arr.shape}")
    if not np.all(np.abs(arr) == 1.0):
        raise ValueError("pattern entries must be exactly +-1 for PNG export")
    px = ((arr + 1.0) * 127.5).astype(np.uint8)  # -1 -> 0, +1 -> 255
    if px.shape[0] == 1:
        px = np.repeat(px, 3, axis=0)
    img = PILImage.fromarray(px.transpose(1, 2, 0), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def image_from_png(data: bytes) -> np.ndarray:
    """Decode PNG bytes into a (3, H, W) float64 image with values in [0, 255]."""
    try:
        img = PILImage.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise PngDecodeError(f"cannot decode PNG: {exc}") from exc
    rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    return rgb.transpose(2, 0, 1)
