"""k-level stochastic quantization, Binomial noising and the client wire format.

Wire layout of one client message (all integers little-endian)::

    offset  size  field
    0       2     magic 0xC9 0x5D
    2       1     version (= 1)
    3       1     flags (bit 0: rotation on)
    4       4     d  (unpadded dimension)
    8       4     k  (quantization levels)
    12      4     m  (Binomial trials per coordinate)
    16      4     p numerator
    20      4     p denominator
    24      8     xmax (IEEE-754 binary64)
    32      1     rotation generator id (0 when rotation is off)
    33      8     rotation seed (0 when rotation is off)
    41      4     payload length in bytes
    45      ...   payload

The payload holds one symbol in ``[0, k-1+m]`` per coordinate (``d``
coordinates, or the next power of two above ``d`` when rotation is on), each
written with ``ceil(log2(k+m))`` bits, least-significant bit first, in index
order, zero-padded to a whole byte.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from dpdme._checks import require_finite, require_finite_array
from dpdme.transform import GENERATOR_NONE, GENERATOR_PCG64, next_power_of_two

MAGIC = b"\xc9\x5d"
VERSION = 1
FLAG_ROTATE = 0x01
_HEADER = struct.Struct("<2sBBIIIIIdBQI")
HEADER_BYTES = _HEADER.size
HEADER_BITS = 8 * HEADER_BYTES


@dataclass(frozen=True)
class QuantizerConfig:
    levels: int
    xmax: float

    def __post_init__(self):
        require_finite(xmax=self.xmax)
        if self.levels < 2:
            raise ValueError(f"need at least 2 levels, got {self.levels}")
        if self.xmax <= 0:
            raise ValueError(f"xmax must be positive, got {self.xmax}")

    @property
    def spacing(self) -> float:
        """Distance ``2 xmax / (k-1)`` between adjacent grid points."""
        return 2.0 * self.xmax / (self.levels - 1)

    def grid_value(self, level):
        """Grid point ``B(r) = -xmax + r * spacing``."""
        return -self.xmax + np.asarray(level) * self.spacing


def clip_coordinates(x, cfg: QuantizerConfig) -> tuple[np.ndarray, int]:
    """Clamp to ``[-xmax, xmax]``; also returns how many coordinates moved."""
    x = np.asarray(x, dtype=np.float64)
    require_finite_array("x", x)
    clipped = np.clip(x, -cfg.xmax, cfg.xmax)
    return clipped, int(np.count_nonzero(clipped != x))


def bin_position(x: np.ndarray, cfg: QuantizerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Lower bin index ``r`` and the fractional offset in ``[0, 1]`` above ``B(r)``.

    ``x`` must already be clipped.
    """
    t = (x + cfg.xmax) / cfg.spacing
    r = np.clip(np.floor(t), 0, cfg.levels - 2).astype(np.int64)
    frac = np.clip(t - r, 0.0, 1.0)
    return r, frac


def stochastic_quantize(x, cfg: QuantizerConfig, rng: np.random.Generator) -> np.ndarray:
    """Clip ``x`` and round each coordinate to an adjacent level at random.

    Level ``r+1`` is chosen with probability ``(x - B(r)) / spacing``, so the
    grid value of the output is unbiased for clipped ``x``. A coordinate
    lying exactly on ``B(r)`` maps to ``r`` with probability one.
    """
    clipped, _ = clip_coordinates(x, cfg)
    r, frac = bin_position(clipped, cfg)
    return r + (rng.random(r.shape) < frac)


def add_binomial_noise(levels, m: int, p, rng: np.random.Generator) -> np.ndarray:
    """Add independent ``Bin(m, p)`` draws to every level.

    numpy's sampler is exact (inversion for small ``m p``, BTPE otherwise).
    """
    levels = np.asarray(levels, dtype=np.int64)
    if m < 0:
        raise ValueError("m must be nonnegative")
    if m == 0:
        return levels.copy()
    return levels + rng.binomial(m, float(p), size=levels.shape)


def bits_per_symbol(k: int, m: int) -> int:
    """``ceil(log2(k + m))``: bits for a symbol in ``[0, k-1+m]``."""
    return max(1, (k + m - 1).bit_length())


def payload_bytes(count: int, k: int, m: int) -> int:
    return (count * bits_per_symbol(k, m) + 7) // 8


class EncodeError(ValueError):
    pass


class DecodeError(ValueError):
    pass


class TruncatedMessageError(DecodeError):
    pass


class VersionMismatchError(DecodeError):
    pass


class SymbolRangeError(DecodeError):
    pass


@dataclass(frozen=True)
class MessageHeader:
    d: int
    k: int
    m: int
    p: Fraction
    xmax: float
    rotate: bool = False
    generator: int = GENERATOR_NONE
    rotation_seed: int = 0

    @property
    def coordinate_count(self) -> int:
        return next_power_of_two(self.d) if self.rotate else self.d

    @property
    def max_symbol(self) -> int:
        return self.k - 1 + self.m


def as_fraction(p) -> Fraction:
    """Exact rational form of ``p`` with a 32-bit denominator."""
    frac = Fraction(p)
    if frac.denominator >= 2**32:
        frac = frac.limit_denominator(2**32 - 1)
    if not 0 < frac < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    return frac


def pack_symbols(values: np.ndarray, width: int) -> bytes:
    values = np.asarray(values, dtype=np.uint64)
    shifts = np.arange(width, dtype=np.uint64)
    bits = ((values[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_symbols(payload: bytes, count: int, width: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    body, tail = bits[: count * width], bits[count * width :]
    if tail.any():
        raise DecodeError("nonzero padding bits after the last symbol")
    weights = np.uint64(1) << np.arange(width, dtype=np.uint64)
    return (body.reshape(count, width).astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64).astype(np.int64)


def encode_message(values, header: MessageHeader) -> bytes:
    """Serialize one client's noised levels. Raises :class:`EncodeError` on bad input."""
    values = np.asarray(values)
    if values.ndim != 1 or values.shape[0] != header.coordinate_count:
        raise EncodeError(f"expected {header.coordinate_count} symbols, got shape {values.shape}")
    if values.size and (values.min() < 0 or values.max() > header.max_symbol):
        raise EncodeError(f"symbol outside [0, {header.max_symbol}]")
    p = as_fraction(header.p)
    for name in ("d", "k", "m"):
        if not 0 <= getattr(header, name) < 2**32:
            raise EncodeError(f"{name} does not fit in 32 bits")
    if header.rotate and header.generator == GENERATOR_NONE:
        raise EncodeError("rotation requires a generator id")
    width = bits_per_symbol(header.k, header.m)
    payload = pack_symbols(values, width)
    head = _HEADER.pack(
        MAGIC,
        VERSION,
        FLAG_ROTATE if header.rotate else 0,
        header.d,
        header.k,
        header.m,
        p.numerator,
        p.denominator,
        float(header.xmax),
        header.generator if header.rotate else GENERATOR_NONE,
        header.rotation_seed if header.rotate else 0,
        len(payload),
    )
    return head + payload


def decode_message(data: bytes) -> tuple[np.ndarray, MessageHeader]:
    """Inverse of :func:`encode_message`; never returns a partial vector."""
    if len(data) < HEADER_BYTES:
        raise TruncatedMessageError(f"message has {len(data)} bytes, header needs {HEADER_BYTES}")
    magic, version, flags, d, k, m, num, den, xmax, gen, seed, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DecodeError("bad magic bytes")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    if flags & ~FLAG_ROTATE:
        raise DecodeError(f"unknown flag bits {flags:#x}")
    if d < 1 or k < 2 or den == 0 or not 0 < num < den:
        raise DecodeError("invalid protocol parameters in header")
    if not (math.isfinite(xmax) and xmax > 0):
        raise DecodeError("invalid xmax in header")
    rotate = bool(flags & FLAG_ROTATE)
    if rotate and gen != GENERATOR_PCG64:
        raise DecodeError(f"unknown rotation generator id {gen}")
    header = MessageHeader(
        d=d,
        k=k,
        m=m,
        p=Fraction(num, den),
        xmax=xmax,
        rotate=rotate,
        generator=gen if rotate else GENERATOR_NONE,
        rotation_seed=seed if rotate else 0,
    )
    expected = payload_bytes(header.coordinate_count, k, m)
    if length != expected:
        raise DecodeError(f"payload length field {length} != expected {expected}")
    payload = data[HEADER_BYTES:]
    if len(payload) < length:
        raise TruncatedMessageError(f"payload has {len(payload)} bytes, expected {length}")
    if len(payload) > length:
        raise DecodeError("trailing bytes after payload")
    values = unpack_symbols(payload, header.coordinate_count, bits_per_symbol(k, m))
    if values.size and values.max() > header.max_symbol:
        raise SymbolRangeError(f"symbol outside [0, {header.max_symbol}]")
    return values, header
