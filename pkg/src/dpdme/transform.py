"""Randomized Hadamard rotation ``R = H A / sqrt(d)`` driven by a public seed."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dpdme._checks import require_finite_array

# Generator ids carried in the wire header.
GENERATOR_NONE = 0
GENERATOR_PCG64 = 1


def next_power_of_two(d: int) -> int:
    if d < 1:
        raise ValueError(f"dimension must be positive, got {d}")
    return 1 << (d - 1).bit_length()


def is_power_of_two(d: int) -> bool:
    return d >= 1 and d & (d - 1) == 0


@dataclass(frozen=True)
class RotationSeed:
    seed: int
    dim: int
    generator: int = GENERATOR_PCG64

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.generator != GENERATOR_PCG64:
            raise ValueError(f"unknown rotation generator id {self.generator}")

    @property
    def padded_dim(self) -> int:
        return next_power_of_two(self.dim)

    def signs(self) -> np.ndarray:
        """Rademacher diagonal of length ``padded_dim``.

        Bits are taken least-significant first from raw PCG64 outputs, whose
        stream is fixed by the seed alone (independent of numpy's
        distribution code), so every party derives identical signs.
        """
        size = self.padded_dim
        words = np.random.PCG64(self.seed).random_raw((size + 63) // 64)
        bits = np.unpackbits(words.astype("<u8").view(np.uint8), bitorder="little")[:size]
        return 1.0 - 2.0 * bits.astype(np.float64)


@dataclass
class RotatedVector:
    values: np.ndarray
    original_dim: int


def fwht(values: np.ndarray, inplace: bool = False) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform ``H x`` along the last axis.

    Uses the standard butterfly; with ``inplace=True`` the input buffer
    (which must be a C-contiguous float array) is overwritten and no
    temporaries are allocated.
    """
    x = np.asarray(values)
    if not inplace or not x.flags.c_contiguous or not np.issubdtype(x.dtype, np.floating):
        x = np.array(x, dtype=np.float64, order="C")
    n = x.shape[-1] if x.ndim else 0
    if not is_power_of_two(n):
        raise ValueError(f"length must be a power of two, got {n}")
    flat = x.reshape(-1, n)
    h = 1
    while h < n:
        blocks = flat.reshape(flat.shape[0], n // (2 * h), 2, h)
        a = blocks[:, :, 0, :]
        b = blocks[:, :, 1, :]
        # (a, b) <- (a + b, a - b)
        a += b
        b *= -2.0
        b += a
        h *= 2
    return x


def _pad(x: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros(x.shape[:-1] + (size,), dtype=np.float64)
    out[..., : x.shape[-1]] = x
    return out


def rotate(x, seed: RotationSeed) -> RotatedVector:
    """Apply ``R = H A / sqrt(padded_dim)`` to ``x`` (zero-padded).

    ``x`` may be a single vector or a batch with the vectors on the last axis.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != seed.dim:
        raise ValueError(f"vector has dimension {x.shape[-1]}, seed expects {seed.dim}")
    return RotatedVector(values=rotate_with_signs(x, seed.signs()), original_dim=seed.dim)


def inverse_rotate(rotated, seed: RotationSeed) -> np.ndarray:
    """Apply ``R^{-1} = A H / sqrt(padded_dim)`` and drop the padding."""
    if isinstance(rotated, RotatedVector):
        if rotated.original_dim != seed.dim:
            raise ValueError("rotated vector and seed disagree on the original dimension")
        values = rotated.values
    else:
        values = rotated
    values = np.asarray(values)
    if values.shape[-1] != seed.padded_dim:
        raise ValueError(f"rotated vector has length {values.shape[-1]}, expected {seed.padded_dim}")
    return inverse_rotate_with_signs(values, seed.signs(), seed.dim)


def rotate_with_signs(x: np.ndarray, signs: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    require_finite_array("x", x)
    size = signs.shape[-1]
    if not is_power_of_two(size) or x.shape[-1] > size:
        raise ValueError("sign vector must have power-of-two length covering the input")
    buf = _pad(x, size)
    buf *= signs
    fwht(buf, inplace=True)
    buf /= math.sqrt(size)
    return buf


def inverse_rotate_with_signs(values: np.ndarray, signs: np.ndarray, dim: int) -> np.ndarray:
    buf = np.array(values, dtype=np.float64, order="C")
    if buf.shape[-1] != signs.shape[-1]:
        raise ValueError("rotated vector and sign vector lengths differ")
    fwht(buf, inplace=True)
    buf /= math.sqrt(buf.shape[-1])
    buf *= signs
    return buf[..., :dim].copy()


def xmax_bound(D: float, n: int, d: int, delta: float) -> float:
    """Coordinate bound ``2 D sqrt(log(2 n d' / delta) / d')`` with ``d'`` the padded dimension.

    After a random Hadamard rotation all ``n`` client vectors of norm ``D``
    stay within this bound per coordinate except with probability about
    ``delta``.
    """
    if D <= 0 or n < 1 or delta <= 0:
        raise ValueError("need D > 0, n >= 1 and delta > 0")
    padded = next_power_of_two(d)
    return 2.0 * D * math.sqrt(math.log(2.0 * n * padded / delta) / padded)
