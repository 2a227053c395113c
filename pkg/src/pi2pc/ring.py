"""Fixed-point arithmetic over the ring Z_{2^k}.

Values are carried as k-bit words in uint64 arrays, reduced mod 2^k, with
two's-complement signed interpretation in [-2^{k-1}, 2^{k-1}).  Reals map to
ring elements through a scale of 2^f (f fractional bits).  All arithmetic
wraps silently; nothing here ever raises on overflow except `encode`, whose
input must fit the representable range.

Tensor file format ("FXT1", little-endian):

    magic "FXT1" | u8 ring_bits | u8 frac_bits | u8 ndim | u32 extents[ndim]
    | data words, each ceil(k/8) bytes

Rounding in `encode` is round-half-away-from-zero so that independently
produced tensors match bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

FXT_MAGIC = b"FXT1"


@dataclass(frozen=True)
class RingConfig:
    """Ring width k and fixed-point fractional bits f."""

    ring_bits: int = 32
    frac_bits: int = 16

    def __post_init__(self):
        if not 2 <= self.ring_bits <= 64:
            raise ValueError(f"ring_bits must be in [2, 64], got {self.ring_bits}")
        if not 0 <= self.frac_bits < self.ring_bits:
            raise ValueError(
                f"frac_bits must be in [0, ring_bits), got {self.frac_bits}"
            )

    @property
    def modulus(self) -> int:
        return 1 << self.ring_bits

    @property
    def mask(self) -> int:
        return (1 << self.ring_bits) - 1

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def half(self) -> int:
        """2^{k-1}: boundary between non-negative and negative residues."""
        return 1 << (self.ring_bits - 1)

    @property
    def word_bytes(self) -> int:
        return (self.ring_bits + 7) // 8


DEFAULT_CONFIG = RingConfig()


def _mask(data: np.ndarray, cfg: RingConfig) -> np.ndarray:
    return data & np.uint64(cfg.mask)


def to_signed(data: np.ndarray, cfg: RingConfig) -> np.ndarray:
    """Two's-complement interpretation of k-bit words as int64."""
    data = np.asarray(data, dtype=np.uint64)
    if cfg.ring_bits == 64:
        return np.ascontiguousarray(data).view(np.int64)
    signed = data.astype(np.int64)  # values < 2^63 here: exact
    neg = signed >= cfg.half
    return np.where(neg, signed - cfg.modulus, signed)


def from_signed(values: np.ndarray, cfg: RingConfig) -> np.ndarray:
    """Reduce int64 values into k-bit words."""
    return np.asarray(values).astype(np.int64).view(np.uint64) & np.uint64(cfg.mask)


def encode(values, cfg: RingConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Map reals to ring elements: round(v * 2^f) mod 2^k.

    Raises OverflowError if any |v| >= 2^{k-f-1} (the representable bound).
    """
    v = np.asarray(values, dtype=np.float64)
    limit = float(1 << (cfg.ring_bits - cfg.frac_bits - 1))
    if np.any(~np.isfinite(v)) or np.any(np.abs(v) >= limit):
        raise OverflowError(
            f"value out of fixed-point range (|v| must be < {limit:g} "
            f"at k={cfg.ring_bits}, f={cfg.frac_bits})"
        )
    # round half away from zero
    scaled = np.sign(v) * np.floor(np.abs(v) * cfg.scale + 0.5)
    return from_signed(scaled.astype(np.int64), cfg)


def decode(elems, cfg: RingConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Inverse of encode: signed interpretation divided by 2^f."""
    return to_signed(np.asarray(elems, dtype=np.uint64), cfg) / float(cfg.scale)


def ring_add(a, b, cfg: RingConfig = DEFAULT_CONFIG) -> np.ndarray:
    return _mask(np.asarray(a, np.uint64) + np.asarray(b, np.uint64), cfg)


def ring_sub(a, b, cfg: RingConfig = DEFAULT_CONFIG) -> np.ndarray:
    return _mask(np.asarray(a, np.uint64) - np.asarray(b, np.uint64), cfg)


def ring_neg(a, cfg: RingConfig = DEFAULT_CONFIG) -> np.ndarray:
    return _mask(-np.asarray(a, np.uint64), cfg)


def ring_mul(a, b, cfg: RingConfig = DEFAULT_CONFIG) -> np.ndarray:
    return _mask(np.asarray(a, np.uint64) * np.asarray(b, np.uint64), cfg)


def ring_matmul(a, b, cfg: RingConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Matrix product mod 2^k (uint64 wraparound is exact mod 2^64)."""
    return _mask(np.matmul(np.asarray(a, np.uint64), np.asarray(b, np.uint64)), cfg)


def rand_ring(rng: np.random.Generator, shape, cfg: RingConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Uniform elements of Z_{2^k}."""
    if cfg.ring_bits == 64:
        lo = rng.integers(0, 1 << 32, size=shape, dtype=np.uint64)
        hi = rng.integers(0, 1 << 32, size=shape, dtype=np.uint64)
        return lo | (hi << np.uint64(32))
    return rng.integers(0, cfg.modulus, size=shape, dtype=np.uint64)


class FixedTensor:
    """n-dimensional tensor of k-bit ring elements with a fixed-point scale."""

    __slots__ = ("data", "shape", "config")

    def __init__(self, data: np.ndarray, shape: tuple[int, ...], config: RingConfig):
        data = np.ascontiguousarray(data, dtype=np.uint64).reshape(-1)
        n = int(np.prod(shape)) if shape else 1
        if data.size != n:
            raise ValueError(f"data length {data.size} != prod(shape) {n}")
        self.data = _mask(data, config)
        self.shape = tuple(int(s) for s in shape)
        self.config = config

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_real(cls, values, cfg: RingConfig = DEFAULT_CONFIG) -> "FixedTensor":
        v = np.asarray(values, dtype=np.float64)
        return cls(encode(v, cfg).reshape(-1), v.shape, cfg)

    @classmethod
    def from_ring(cls, words, cfg: RingConfig = DEFAULT_CONFIG) -> "FixedTensor":
        w = np.asarray(words, dtype=np.uint64)
        return cls(w.reshape(-1), w.shape, cfg)

    @classmethod
    def zeros(cls, shape, cfg: RingConfig = DEFAULT_CONFIG) -> "FixedTensor":
        n = int(np.prod(shape)) if shape else 1
        return cls(np.zeros(n, dtype=np.uint64), tuple(shape), cfg)

    # -- views -------------------------------------------------------------

    @property
    def size(self) -> int:
        return self.data.size

    def array(self) -> np.ndarray:
        """Ring words shaped to self.shape."""
        return self.data.reshape(self.shape)

    def to_real(self) -> np.ndarray:
        return decode(self.data, self.config).reshape(self.shape)

    def reshape(self, shape) -> "FixedTensor":
        return FixedTensor(self.data, tuple(shape), self.config)

    def copy(self) -> "FixedTensor":
        return FixedTensor(self.data.copy(), self.shape, self.config)

    def __repr__(self):
        return (
            f"FixedTensor(shape={self.shape}, k={self.config.ring_bits}, "
            f"f={self.config.frac_bits})"
        )

    def __eq__(self, other):
        return (
            isinstance(other, FixedTensor)
            and self.shape == other.shape
            and self.config == other.config
            and bool(np.array_equal(self.data, other.data))
        )

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        """FXT1 serialization (little-endian)."""
        head = FXT_MAGIC + struct.pack(
            "<BBB", self.config.ring_bits, self.config.frac_bits, len(self.shape)
        )
        head += struct.pack(f"<{len(self.shape)}I", *self.shape)
        return head + pack_words(self.data, self.config.word_bytes)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FixedTensor":
        if blob[:4] != FXT_MAGIC:
            raise ValueError("not an FXT1 tensor (bad magic)")
        k, f, ndim = struct.unpack_from("<BBB", blob, 4)
        extents = struct.unpack_from(f"<{ndim}I", blob, 7)
        cfg = RingConfig(k, f)
        off = 7 + 4 * ndim
        n = int(np.prod(extents)) if extents else 1
        words = unpack_words(blob[off:], n, cfg.word_bytes)
        return cls(words, extents, cfg)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FixedTensor":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def pack_words(words: np.ndarray, word_bytes: int) -> bytes:
    """Serialize uint64 words as fixed-width little-endian byte groups."""
    raw = np.ascontiguousarray(words, dtype="<u8").view(np.uint8).reshape(-1, 8)
    return raw[:, :word_bytes].tobytes()

def unpack_words(blob: bytes, count: int, word_bytes: int) -> np.ndarray:
    need = count * word_bytes
    if len(blob) < need:
        raise ValueError(f"truncated word data: have {len(blob)}, need {need}")
    raw = np.frombuffer(blob[:need], dtype=np.uint8).reshape(count, word_bytes)
    out = np.zeros((count, 8), dtype=np.uint8)
    out[:, :word_bytes] = raw
    return out.view("<u8").reshape(count).astype(np.uint64)
