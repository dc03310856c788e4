"""Feature/mask containers, their on-disk formats, and the seeded RNG.

Binary layouts (all integers little-endian):

  FTNS feature file:  magic b"FTNS" | u32 version=1 | u32 C | u32 H | u32 W
                      | C*H*W float32 values, channel-major, row-major.
  FMSK mask file:     magic b"FMSK" | u32 version=1 | u32 H | u32 W
                      | H*W uint8 values, each 0 or 1, row-major.

In-memory values are float64; files store float32. Reading back a file that
was written from float32-representable data is bit-exact.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

FEATURE_MAGIC = b"FTNS"
MASK_MAGIC = b"FMSK"
FORMAT_VERSION = 1

_U64 = (1 << 64) - 1


class FormatError(Exception):
    """Base class for binary format violations."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class InvalidMaskError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    """A C x H x W stack of real-valued feature planes."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"feature map must be 3-D (C,H,W), got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class BinaryMask:
    """An H x W mask whose entries are exactly 0 or 1."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"mask must be 2-D (H,W), got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise InvalidMaskError("mask entries must be 0 or 1")
        object.__setattr__(self, "values", v.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def foreground_fraction(self) -> float:
        return float(self.values.mean())


def encode_feature(values: np.ndarray) -> bytes:
    """Feature-file byte layout; refuses NaN/Inf (also after float32 narrowing)."""
    if not np.isfinite(values).all():
        raise NonFiniteError("refusing to write non-finite feature values")
    with np.errstate(over="ignore"):
        payload = values.astype("<f4")
    if not np.isfinite(payload).all():
        raise NonFiniteError("values overflow float32 storage precision")
    c, h, w = values.shape
    return (FEATURE_MAGIC + struct.pack("<IIII", FORMAT_VERSION, c, h, w)
            + payload.tobytes())


def decode_feature(blob: bytes, context: str = "feature blob") -> np.ndarray:
    header = struct.calcsize("<IIII") + 4
    if len(blob) < header:
        raise TruncatedFileError(f"{context}: {len(blob)} bytes is shorter than the header")
    if blob[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{context}: expected magic {FEATURE_MAGIC!r}, got {blob[:4]!r}")
    version, c, h, w = struct.unpack_from("<IIII", blob, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{context}: version {version} unsupported")
    expected = header + 4 * c * h * w
    if len(blob) < expected:
        raise TruncatedFileError(f"{context}: payload ends at {len(blob)}, expected {expected}")
    if len(blob) > expected:
        raise FormatError(f"{context}: {len(blob) - expected} trailing bytes after payload")
    values = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=header)
    return values.astype(np.float64).reshape(c, h, w)


def write_feature_file(feature: FeatureMap, path) -> None:
    """Serialize a feature map; refuses NaN/Inf (also after float32 narrowing)."""
    blob = encode_feature(feature.values)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_feature_file(path) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    return FeatureMap(decode_feature(blob, context=str(path)))


def write_mask_file(mask: BinaryMask, path) -> None:
    h, w = mask.values.shape
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, h, w))
        fh.write(mask.values.astype(np.uint8).tobytes())


def read_mask_file(path) -> BinaryMask:
    with open(path, "rb") as fh:
        blob = fh.read()
    header = struct.calcsize("<III") + 4
    if len(blob) < header:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes is shorter than the header")
    if blob[:4] != MASK_MAGIC:
        raise BadMagicError(f"{path}: expected magic {MASK_MAGIC!r}, got {blob[:4]!r}")
    version, h, w = struct.unpack_from("<III", blob, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version} unsupported")
    expected = header + h * w
    if len(blob) < expected:
        raise TruncatedFileError(f"{path}: payload ends at {len(blob)}, expected {expected}")
    if len(blob) > expected:
        raise FormatError(f"{path}: {len(blob) - expected} trailing bytes after payload")
    values = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=header)
    if values.max(initial=0) > 1:
        raise InvalidMaskError(f"{path}: mask entries outside {{0,1}}")
    return BinaryMask(values.reshape(h, w).copy())


def _splitmix64(x: int) -> int:
    """Deterministic 64-bit mixer used to derive child stream keys."""
    x = (x + 0x9E3779B97F4A7C15) & _U64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _U64
    return x ^ (x >> 31)


class Rng:
    """Counter-based random stream (Philox) with an explicit draw counter.

    Equal seeds give equal draw sequences on every platform. `child(tag)`
    derives an independent stream; derivation is pure 64-bit integer math,
    so substream layouts are reproducible too. `draw_count` increments once
    per method call, which lets tests assert that a code path consumed no
    randomness at all.
    """

    def __init__(self, seed: int, _key: int | None = None):
        self.seed = seed & _U64
        self._key = _splitmix64(self.seed) if _key is None else (_key & _U64)
        self._gen = np.random.Generator(np.random.Philox(key=self._key))
        self.draw_count = 0

    def child(self, tag: int | str) -> "Rng":
        """Independent substream; does not advance this stream's counter."""
        if isinstance(tag, str):
            digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
            tag = int.from_bytes(digest, "little")
        return Rng(self.seed, _key=_splitmix64(self._key ^ _splitmix64(tag & _U64)))

    def uniform(self, size=None):
        """Uniform draws on [0, 1)."""
        self.draw_count += 1
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        self.draw_count += 1
        return self._gen.integers(low, high, size=size)

    def normal(self, size=None):
        self.draw_count += 1
        return self._gen.normal(size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.draw_count += 1
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order random."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct values from {n}")
        self.draw_count += 1
        return self._gen.permutation(n)[:k]
