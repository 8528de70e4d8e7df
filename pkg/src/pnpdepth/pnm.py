"""Binary portable graymap/pixmap readers and writers.

Depth maps are stored as 16-bit P5 graymaps (big-endian sample order, per
the format convention) quantized to millimeters; RGB images as 8-bit P6
pixmaps.  These formats are dependency-free, bit-exact, and diffable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError


def write_pgm16(path, values: np.ndarray) -> None:
    """Write an (H, W) array of uint16 samples as a binary P5 graymap."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ConfigError(f"pgm writer expects (H, W), got shape {arr.shape}")
    arr = arr.astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(arr.tobytes())


def write_ppm8(path, rgb: np.ndarray) -> None:
    """Write a (3, H, W) float array in [0, 1] as a binary P6 pixmap."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ConfigError(f"ppm writer expects (3, H, W), got shape {arr.shape}")
    quant = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quant.transpose(1, 2, 0).tobytes())


def _read_header(data: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Parse magic, width, height, maxval; return them plus payload offset."""
    if len(data) < 2 or data[:1] != b"P":
        raise ConfigError(f"not a PNM file: {path}")
    magic = data[:2]
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise ConfigError(f"corrupt PNM header in {path}")
        fields.append(int(token))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    return magic, width, height, maxval, pos


def read_pgm16(path) -> np.ndarray:
    """Read a 16-bit binary P5 graymap as an (H, W) uint16 array."""
    data = Path(path).read_bytes()
    magic, w, h, maxval, pos = _read_header(data, path)
    if magic != b"P5" or maxval != 65535:
        raise ConfigError(f"expected 16-bit P5 graymap: {path}")
    payload = data[pos:pos + 2 * w * h]
    if len(payload) != 2 * w * h:
        raise ConfigError(f"truncated graymap payload in {path}")
    return np.frombuffer(payload, dtype=">u2").reshape(h, w).astype(np.uint16)


def read_ppm8(path) -> np.ndarray:
    """Read an 8-bit binary P6 pixmap as a (3, H, W) float array in [0, 1]."""
    data = Path(path).read_bytes()
    magic, w, h, maxval, pos = _read_header(data, path)
    if magic != b"P6" or maxval != 255:
        raise ConfigError(f"expected 8-bit P6 pixmap: {path}")
    payload = data[pos:pos + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise ConfigError(f"truncated pixmap payload in {path}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def depth_to_u16mm(depth_m: np.ndarray) -> np.ndarray:
    """Quantize a depth map in meters to clipped uint16 millimeters."""
    return np.clip(np.rint(depth_m * 1000.0), 0, 65535).astype(np.uint16)


def u16mm_to_depth(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float64) / 1000.0


IMPROVEMENT_ZERO = 32768


def encode_improvement_map(delta: np.ndarray) -> tuple[np.ndarray, float]:
    """Map a signed per-pixel improvement to u16 with 32768 = zero.

    Returns the encoded map and the scale (meters per count).  Positive
    deltas (improvement) map above 32768, negative below.
    """
    peak = float(np.abs(delta).max())
    scale = peak / 32767.0 if peak > 0 else 1.0
    enc = np.clip(np.rint(delta / scale) + IMPROVEMENT_ZERO, 0, 65535)
    return enc.astype(np.uint16), scale


def decode_improvement_map(encoded: np.ndarray, scale: float) -> np.ndarray:
    return (encoded.astype(np.float64) - IMPROVEMENT_ZERO) * scale
