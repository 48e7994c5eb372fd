"""Image buffers, HDR/LDR file formats, and dynamic-range conversions.

Formats are implemented bit-exactly so datasets regenerate byte-for-byte:

  PFM   color "PF", little-endian (scale -1.0), float32 scanlines stored
        bottom row first.
  RGBE  Radiance ".hdr": "#?RADIANCE" header, "-Y H +X W" resolution line.
        The reader handles both flat and new-style RLE scanlines; the
        writer always emits flat scanlines.
  PPM   binary P6, maxval 255.

Every decoded image is an :class:`ImageBuffer`: an immutable float32
(H, W, 3) array plus a :class:`DynamicRangeTag` that records which value
convention the pixels follow. Operations validate the tag of their inputs
so an HDR buffer can never silently flow into an LDR-only code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Malformed or unsupported image file."""


class DynamicRangeTag(Enum):
    LDR_NORMALIZED = "ldr_normalized"   # values in [0, 1]
    HDR_LINEAR = "hdr_linear"           # values >= 0, finite
    LOG_HDR = "log_hdr"                 # ln(linear + epsilon_log)


@dataclass(frozen=True)
class ImageBuffer:
    """A (height, width, 3) float32 image with a dynamic-range tag."""

    data: np.ndarray
    tag: DynamicRangeTag

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"degenerate image shape {arr.shape}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def _require_tag(buf: ImageBuffer, tag: DynamicRangeTag, op: str) -> None:
    if buf.tag is not tag:
        raise ValueError(f"{op} expects a {tag.name} buffer, got {buf.tag.name}")


def _check_finite(arr: np.ndarray, context: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        y, x, c = (int(v) for v in np.argwhere(bad)[0])
        raise FormatError(
            f"{context}: non-finite value at row={y}, col={x}, channel={c}"
        )


# ----------------------------------------------------------------------
# PFM (portable float map, color only)
# ----------------------------------------------------------------------

def _read_token(f) -> bytes:
    """Read one whitespace-delimited ASCII token."""
    tok = b""
    while True:
        ch = f.read(1)
        if ch == b"":
            raise FormatError("PFM: unexpected end of header")
        if ch in b" \t\r\n":
            if tok:
                return tok
            continue
        tok += ch


def read_pfm(path: str | Path) -> ImageBuffer:
    """Read a color PFM file into an HDR_LINEAR buffer.

    The file stores scanlines bottom row first; the returned buffer has
    row 0 at the top of the image.
    """
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic != b"PF":
            raise FormatError(f"PFM: bad magic {magic!r} (only color 'PF' supported)")
        try:
            width = int(_read_token(f))
            height = int(_read_token(f))
            scale = float(_read_token(f))
        except ValueError as e:
            raise FormatError(f"PFM: malformed header: {e}") from e
        if width < 1 or height < 1:
            raise FormatError(f"PFM: bad dimensions {width}x{height}")
        if scale == 0.0:
            raise FormatError("PFM: zero scale factor")
        endian = "<" if scale < 0 else ">"
        n = width * height * 3
        payload = f.read(n * 4)
        if len(payload) != n * 4:
            raise FormatError(
                f"PFM: truncated payload, expected {n * 4} bytes, got {len(payload)}"
            )
    arr = np.frombuffer(payload, dtype=endian + "f4").reshape(height, width, 3)
    arr = np.flipud(arr).astype(np.float32)
    _check_finite(arr, "PFM")
    if (arr < 0).any():
        y, x, c = (int(v) for v in np.argwhere(arr < 0)[0])
        raise FormatError(f"PFM: negative radiance at row={y}, col={x}, channel={c}")
    return ImageBuffer(arr, DynamicRangeTag.HDR_LINEAR)


def write_pfm(buffer: ImageBuffer, path: str | Path) -> None:
    """Write an HDR_LINEAR buffer as little-endian color PFM (scale -1.0)."""
    _require_tag(buffer, DynamicRangeTag.HDR_LINEAR, "write_pfm")
    arr = buffer.data
    _check_finite(arr, "write_pfm")
    with open(path, "wb") as f:
        f.write(b"PF\n")
        f.write(f"{buffer.width} {buffer.height}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).astype("<f4").tobytes())


# ----------------------------------------------------------------------
# Radiance RGBE (.hdr)
# ----------------------------------------------------------------------

def rgbe_encode(rgb: np.ndarray) -> np.ndarray:
    """Encode float RGB to RGBE bytes.

    With m * 2**e the normalized fraction/exponent of max(r, g, b), each
    channel byte is round(channel * 256 / 2**e) and E = e + 128. All-zero
    (or sub-denormal) pixels encode as (0, 0, 0, 0).
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    flat = rgb.reshape(-1, 3)
    out = np.zeros((flat.shape[0], 4), dtype=np.uint8)
    maxc = flat.max(axis=1)
    live = maxc >= 1e-38
    if live.any():
        m, e = np.frexp(maxc[live])
        # round(m * 256) == 256 would overflow the mantissa byte; bumping the
        # exponent keeps every channel byte <= 128 in that case.
        bump = np.floor(m * 256.0 + 0.5) >= 256.0
        e = e + bump.astype(e.dtype)
        scale = np.ldexp(256.0, -e)
        bytes_rgb = np.floor(flat[live] * scale[:, None] + 0.5)
        out[live, :3] = bytes_rgb.astype(np.uint8)
        out[live, 3] = (e + 128).astype(np.uint8)
    return out.reshape(rgb.shape[:-1] + (4,))


def rgbe_decode(rgbe: np.ndarray) -> np.ndarray:
    """Decode RGBE bytes to float RGB: channel = (byte / 256) * 2**(E - 128)."""
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    e = rgbe[..., 3].astype(np.int32) - 128
    scale = np.ldexp(1.0 / 256.0, e)
    rgb = rgbe[..., :3].astype(np.float64) * scale[..., None]
    rgb[rgbe[..., 3] == 0] = 0.0
    return rgb


def read_rgbe(path: str | Path) -> ImageBuffer:
    """Read a Radiance RGBE file (flat or RLE scanlines) into HDR_LINEAR."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"#?RADIANCE") and not raw.startswith(b"#?RGBE"):
        raise FormatError("RGBE: missing #?RADIANCE magic")
    try:
        header_end = raw.index(b"\n\n")
    except ValueError as e:
        raise FormatError("RGBE: header never terminated by blank line") from e
    header = raw[:header_end].decode("ascii", errors="replace")
    if "FORMAT=32-bit_rle_rgbe" not in header:
        raise FormatError("RGBE: missing FORMAT=32-bit_rle_rgbe")
    res_end = raw.index(b"\n", header_end + 2)
    res_line = raw[header_end + 2 : res_end].decode("ascii", errors="replace")
    parts = res_line.split()
    if len(parts) != 4 or parts[0] != "-Y" or parts[2] != "+X":
        raise FormatError(f"RGBE: unsupported resolution line {res_line!r}")
    height, width = int(parts[1]), int(parts[3])
    if height < 1 or width < 1:
        raise FormatError(f"RGBE: bad dimensions {width}x{height}")

    data = raw[res_end + 1 :]
    pos = 0
    rows = np.zeros((height, width, 4), dtype=np.uint8)
    for y in range(height):
        pos = _read_rgbe_scanline(data, pos, rows[y])
    return ImageBuffer(
        rgbe_decode(rows).astype(np.float32), DynamicRangeTag.HDR_LINEAR
    )


def _read_rgbe_scanline(data: bytes, pos: int, row: np.ndarray) -> int:
    """Decode one scanline (flat or new-style RLE) into ``row``; return new pos."""
    width = row.shape[0]
    if pos + 4 > len(data):
        raise FormatError("RGBE: truncated scanline header")
    first = data[pos : pos + 4]
    if first[0] == 2 and first[1] == 2 and (first[2] << 8 | first[3]) == width:
        # new-style RLE: four independently run-length-coded component streams
        pos += 4
        for c in range(4):
            x = 0
            while x < width:
                if pos >= len(data):
                    raise FormatError("RGBE: truncated RLE stream")
                code = data[pos]
                pos += 1
                if code > 128:
                    run = code - 128
                    if x + run > width:
                        raise FormatError(
                            f"RGBE: RLE run overflows scanline at x={x}"
                        )
                    if pos >= len(data):
                        raise FormatError("RGBE: truncated RLE run value")
                    row[x : x + run, c] = data[pos]
                    pos += 1
                    x += run
                else:
                    if code == 0:
                        raise FormatError("RGBE: zero-length RLE dump")
                    if x + code > width:
                        raise FormatError(
                            f"RGBE: RLE dump overflows scanline at x={x}"
                        )
                    if pos + code > len(data):
                        raise FormatError("RGBE: truncated RLE dump")
                    row[x : x + code, c] = np.frombuffer(
                        data[pos : pos + code], dtype=np.uint8
                    )
                    pos += code
                    x += code
        return pos
    # flat scanline: width raw RGBE quadruples
    end = pos + width * 4
    if end > len(data):
        raise FormatError("RGBE: truncated flat scanline")
    row[:] = np.frombuffer(data[pos:end], dtype=np.uint8).reshape(width, 4)
    return end


def write_rgbe(buffer: ImageBuffer, path: str | Path) -> None:
    """Write an HDR_LINEAR buffer as Radiance RGBE with flat scanlines."""
    _require_tag(buffer, DynamicRangeTag.HDR_LINEAR, "write_rgbe")
    _check_finite(buffer.data, "write_rgbe")
    rgbe = rgbe_encode(buffer.data)
    with open(path, "wb") as f:
        f.write(b"#?RADIANCE\n")
        f.write(b"FORMAT=32-bit_rle_rgbe\n")
        f.write(b"\n")
        f.write(f"-Y {buffer.height} +X {buffer.width}\n".encode("ascii"))
        f.write(rgbe.tobytes())


# ----------------------------------------------------------------------
# PPM (binary P6, maxval 255)
# ----------------------------------------------------------------------

def read_ppm(path: str | Path) -> ImageBuffer:
    """Read a binary P6 PPM (maxval 255) into an LDR_NORMALIZED buffer."""
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic != b"P6":
            raise FormatError(f"PPM: bad magic {magic!r}")
        try:
            width = int(_read_token(f))
            height = int(_read_token(f))
            maxval = int(_read_token(f))
        except ValueError as e:
            raise FormatError(f"PPM: malformed header: {e}") from e
        if maxval != 255:
            raise FormatError(f"PPM: only maxval 255 supported, got {maxval}")
        if width < 1 or height < 1:
            raise FormatError(f"PPM: bad dimensions {width}x{height}")
        n = width * height * 3
        payload = f.read(n)
        if len(payload) != n:
            raise FormatError(
                f"PPM: truncated payload, expected {n} bytes, got {len(payload)}"
            )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return ImageBuffer(
        (arr.astype(np.float64) / 255.0).astype(np.float32),
        DynamicRangeTag.LDR_NORMALIZED,
    )


def write_ppm(buffer: ImageBuffer, path: str | Path) -> None:
    """Write an LDR_NORMALIZED buffer as binary P6, rounding half-up."""
    _require_tag(buffer, DynamicRangeTag.LDR_NORMALIZED, "write_ppm")
    arr = np.asarray(buffer.data, dtype=np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("write_ppm: values outside [0, 1]")
    bytes_ = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{buffer.width} {buffer.height}\n255\n".encode("ascii"))
        f.write(bytes_.tobytes())


# ----------------------------------------------------------------------
# Tone mapping and log-domain conversions
# ----------------------------------------------------------------------

def tonemap(buffer_hdr: ImageBuffer, gamma: float) -> ImageBuffer:
    """Map linear HDR into display range: v -> (v / (1 + v)) ** (1 / gamma)."""
    _require_tag(buffer_hdr, DynamicRangeTag.HDR_LINEAR, "tonemap")
    if gamma <= 0:
        raise ValueError(f"tonemap: gamma must be positive, got {gamma}")
    v = buffer_hdr.data.astype(np.float64)
    out = (v / (1.0 + v)) ** (1.0 / gamma)
    return ImageBuffer(out.astype(np.float32), DynamicRangeTag.LDR_NORMALIZED)


DEFAULT_EPSILON_LOG = 1e-4


def log_encode(buffer_hdr: ImageBuffer, epsilon_log: float = DEFAULT_EPSILON_LOG) -> ImageBuffer:
    """v -> ln(v + epsilon_log); epsilon keeps black pixels finite."""
    _require_tag(buffer_hdr, DynamicRangeTag.HDR_LINEAR, "log_encode")
    if epsilon_log <= 0:
        raise ValueError(f"log_encode: epsilon_log must be positive, got {epsilon_log}")
    out = np.log(buffer_hdr.data.astype(np.float64) + epsilon_log)
    return ImageBuffer(out.astype(np.float32), DynamicRangeTag.LOG_HDR)


def log_decode(buffer_log: ImageBuffer, epsilon_log: float = DEFAULT_EPSILON_LOG) -> ImageBuffer:
    """Exact inverse of :func:`log_encode` (clamped at zero radiance)."""
    _require_tag(buffer_log, DynamicRangeTag.LOG_HDR, "log_decode")
    if epsilon_log <= 0:
        raise ValueError(f"log_decode: epsilon_log must be positive, got {epsilon_log}")
    out = np.exp(buffer_log.data.astype(np.float64)) - epsilon_log
    return ImageBuffer(
        np.maximum(out, 0.0).astype(np.float32), DynamicRangeTag.HDR_LINEAR
    )


@dataclass(frozen=True)
class LogAffineDomain:
    """The value convention the diffusion model works in.

    Linear radiance is log-encoded and affinely rescaled so that
    [log_min, log_max] maps onto [-1, 1]. (log_min, log_max) are fixed per
    dataset and travel with the training config and checkpoints.
    """

    log_min: float
    log_max: float
    epsilon_log: float = DEFAULT_EPSILON_LOG

    def __post_init__(self):
        if not self.log_max > self.log_min:
            raise ValueError(
                f"log_max ({self.log_max}) must exceed log_min ({self.log_min})"
            )
        if self.epsilon_log <= 0:
            raise ValueError("epsilon_log must be positive")

    def hdr_to_model(self, buffer_hdr: ImageBuffer) -> np.ndarray:
        """HDR_LINEAR buffer -> float32 array in [-1, 1]."""
        logged = log_encode(buffer_hdr, self.epsilon_log).data.astype(np.float64)
        x = 2.0 * (logged - self.log_min) / (self.log_max - self.log_min) - 1.0
        return np.clip(x, -1.0, 1.0).astype(np.float32)

    def model_to_hdr(self, model_values: np.ndarray) -> ImageBuffer:
        """Array in [-1, 1] -> HDR_LINEAR buffer."""
        x = np.asarray(model_values, dtype=np.float64)
        logged = (x + 1.0) / 2.0 * (self.log_max - self.log_min) + self.log_min
        return log_decode(
            ImageBuffer(logged.astype(np.float32), DynamicRangeTag.LOG_HDR),
            self.epsilon_log,
        )

    @staticmethod
    def from_hdr_values(
        values_min: float, values_max: float, epsilon_log: float = DEFAULT_EPSILON_LOG
    ) -> "LogAffineDomain":
        """Fit the affine range to a dataset's linear radiance extrema."""
        return LogAffineDomain(
            log_min=math.log(max(values_min, 0.0) + epsilon_log),
            log_max=math.log(max(values_max, 0.0) + epsilon_log),
            epsilon_log=epsilon_log,
        )
