"""Writers for the FTNS feature and FMSK mask binary formats.

Layout (all integers unsigned 32-bit little-endian):

    FTNS: magic "FTNS", version 1, C, H, W, then C*H*W IEEE-754 32-bit
          floats, little-endian, channel-major then row-major.
    FMSK: magic "FMSK", version 1, H, W, then H*W unsigned bytes in {0, 1}.

These are implemented against the published byte layout — not by importing
the consuming engine — so the files remain the sole coupling surface.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FTNS_MAGIC = b"FTNS"
FMSK_MAGIC = b"FMSK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised for values that the formats cannot represent."""


def write_feature_file(values: np.ndarray, path) -> None:
    """Write a (C, H, W) float array as an FTNS file."""
    values = np.asarray(values)
    if values.ndim != 3 or min(values.shape) < 1:
        raise FormatError(f"features must be (C, H, W) with all dims >= 1, "
                          f"got shape {values.shape}")
    payload = np.ascontiguousarray(values, dtype="<f4")
    if not np.isfinite(payload).all():
        raise FormatError(f"refusing to write non-finite feature values to {path}")
    c, h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(FTNS_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, c, h, w))
        fh.write(payload.tobytes())


def write_mask_file(values: np.ndarray, path) -> None:
    """Write an (H, W) binary array as an FMSK file."""
    values = np.asarray(values)
    if values.ndim != 2 or min(values.shape) < 1:
        raise FormatError(f"masks must be (H, W) with both dims >= 1, "
                          f"got shape {values.shape}")
    if not np.isin(values, (0, 1)).all():
        raise FormatError(f"mask entries must all be 0 or 1 for {path}")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(FMSK_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, h, w))
        fh.write(np.ascontiguousarray(values, dtype=np.uint8).tobytes())


def read_feature_file(path) -> np.ndarray:
    """Read an FTNS file back (used by the exporter's own tests)."""
    blob = Path(path).read_bytes()
    if blob[:4] != FTNS_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, c, h, w = struct.unpack_from("<IIII", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 20 + 4 * c * h * w
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=20).reshape(c, h, w).copy()


def read_mask_file(path) -> np.ndarray:
    """Read an FMSK file back (used by the exporter's own tests)."""
    blob = Path(path).read_bytes()
    if blob[:4] != FMSK_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, h, w = struct.unpack_from("<III", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(blob) != 16 + h * w:
        raise FormatError(f"{path}: expected {16 + h * w} bytes, got {len(blob)}")
    values = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(h, w).copy()
    if not np.isin(values, (0, 1)).all():
        raise FormatError(f"{path}: mask entries outside {{0, 1}}")
    return values
