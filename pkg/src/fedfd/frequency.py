"""Orthonormal cosine transforms, low-frequency masking, and the spectral wire format.

Images travel as the top-left window of their 2D DCT coefficients: the
transform concentrates most of a smooth image's energy there, so a small
square window carries nearly everything while needing no per-coefficient
position data. All transforms use the orthonormal DCT-II convention, which
makes them energy preserving (Parseval) and self-adjoint up to transposition.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "Spectrum",
    "SpectralBlock",
    "EnergyCurve",
    "ORDERINGS",
    "BLOCK_HEADER_SIZE",
    "dct_matrix",
    "dct1",
    "idct1",
    "dct2",
    "idct2",
    "dct2_array",
    "idct2_array",
    "apply_mask",
    "zero_pad",
    "cumulative_energy",
    "attack_combination_logcount",
    "encode_block",
    "decode_block",
    "block_byte_size",
]

ORDERINGS = ("sequential-topleft", "descending-energy")

# Wire layout, little endian: magic, version, channels, window side,
# original side, class label, then channels*s*s float32 coefficients in
# channel-major row-major order.
_HEADER = struct.Struct("<4sBBHHH")
BLOCK_MAGIC = b"FFDB"
BLOCK_VERSION = 1
BLOCK_HEADER_SIZE = _HEADER.size  # 12 bytes


def _require_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        where = tuple(int(i) for i in bad)
        raise ValueError(f"{name} has a non-finite entry at index {where}")


@dataclass(frozen=True)
class Spectrum:
    """Per-channel 2D DCT coefficients of one square image."""

    coefficients: np.ndarray  # (channels, d, d) float64

    def __post_init__(self):
        coeffs = np.asarray(self.coefficients, dtype=np.float64)
        if coeffs.ndim != 3 or coeffs.shape[1] != coeffs.shape[2] or coeffs.shape[1] < 1:
            raise ValueError(
                f"spectrum coefficients must have shape (channels, d, d), got {coeffs.shape}"
            )
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def channels(self) -> int:
        return self.coefficients.shape[0]

    @property
    def side(self) -> int:
        return self.coefficients.shape[1]

    def energy(self) -> float:
        return float(np.sum(self.coefficients**2))


@dataclass(frozen=True)
class SpectralBlock:
    """Top-left window of a Spectrum; the unit one client transmits.

    The window position is fixed by convention (always the top-left corner),
    so no coordinates are stored and the serialized size depends only on the
    channel count and the window side, never on the original image side.
    """

    window: np.ndarray  # (channels, s, s) float64
    original_side: int
    class_label: int = 0

    def __post_init__(self):
        win = np.asarray(self.window, dtype=np.float64)
        if win.ndim != 3 or win.shape[1] != win.shape[2] or win.shape[1] < 1:
            raise ValueError(f"block window must have shape (channels, s, s), got {win.shape}")
        if not 1 <= win.shape[1] <= self.original_side:
            raise ValueError(
                f"window side {win.shape[1]} must lie in [1, original_side={self.original_side}]"
            )
        if not 0 <= self.class_label < 1 << 16:
            raise ValueError(f"class_label {self.class_label} does not fit in u16")
        if win.shape[0] >= 1 << 8:
            raise ValueError(f"channel count {win.shape[0]} does not fit in u8")
        object.__setattr__(self, "window", win)

    @property
    def channels(self) -> int:
        return self.window.shape[0]

    @property
    def window_side(self) -> int:
        return self.window.shape[1]

    def energy(self) -> float:
        return float(np.sum(self.window**2))


@dataclass(frozen=True)
class EnergyCurve:
    """Cumulative fraction of squared magnitude as coefficients are added."""

    ordering: str
    cumulative_ratio: np.ndarray  # length d*d, nondecreasing, last element 1

    def count_to_reach(self, threshold: float) -> int:
        """Number of coefficients needed for the ratio to reach `threshold`."""
        return int(np.searchsorted(self.cumulative_ratio, threshold) + 1)


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; forward is C @ x, inverse is C.T @ x."""
    if n < 1:
        raise ValueError("transform size must be at least 1")
    k = np.arange(n, dtype=np.float64)[:, None]
    m = np.arange(n, dtype=np.float64)[None, :]
    c = np.cos(np.pi * (2.0 * m + 1.0) * k / (2.0 * n)) * math.sqrt(2.0 / n)
    c[0, :] = 1.0 / math.sqrt(n)
    c.setflags(write=False)
    return c


def dct1(v: np.ndarray) -> np.ndarray:
    """Orthonormal 1D DCT-II of a vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"dct1 expects a nonempty 1D vector, got shape {v.shape}")
    _require_finite(v, "dct1 input")
    return dct_matrix(v.size) @ v


def idct1(v: np.ndarray) -> np.ndarray:
    """Inverse of dct1 (orthonormal DCT-III)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"idct1 expects a nonempty 1D vector, got shape {v.shape}")
    return dct_matrix(v.size).T @ v


def dct2_array(x: np.ndarray) -> np.ndarray:
    """2D transform along the last two axes of an array of square maps."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ValueError(f"expected square maps in the last two axes, got shape {x.shape}")
    c = dct_matrix(x.shape[-1])
    return c @ x @ c.T


def idct2_array(x: np.ndarray) -> np.ndarray:
    """Inverse of dct2_array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ValueError(f"expected square maps in the last two axes, got shape {x.shape}")
    c = dct_matrix(x.shape[-1])
    return c.T @ x @ c


def dct2(image: np.ndarray) -> Spectrum:
    """Per-channel orthonormal 2D DCT-II of a (channels, d, d) image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[1] != image.shape[2] or image.shape[1] < 1:
        raise ValueError(f"dct2 expects an image of shape (channels, d, d), got {image.shape}")
    _require_finite(image, "dct2 input")
    return Spectrum(dct2_array(image))


def idct2(spectrum: Spectrum) -> np.ndarray:
    """Reconstruct the spatial image from its Spectrum."""
    if not isinstance(spectrum, Spectrum):
        raise TypeError(f"idct2 expects a Spectrum, got {type(spectrum).__name__}")
    return idct2_array(spectrum.coefficients)


def apply_mask(spectrum: Spectrum, s: int, class_label: int = 0) -> SpectralBlock:
    """Keep the top-left s-by-s window of each channel, dropping the rest.

    Equivalent to multiplying by a binary mask that is 1 inside the window
    and 0 outside, then discarding the zeros.
    """
    if not 1 <= s <= spectrum.side:
        raise ValueError(f"window side {s} must lie in [1, {spectrum.side}]")
    window = spectrum.coefficients[:, :s, :s].copy()
    return SpectralBlock(window=window, original_side=spectrum.side, class_label=class_label)


def zero_pad(block: SpectralBlock) -> Spectrum:
    """Embed a block into a full spectrum, zero everywhere outside the window."""
    d = block.original_side
    s = block.window_side
    full = np.zeros((block.channels, d, d), dtype=np.float64)
    full[:, :s, :s] = block.window
    return Spectrum(full)


def _sequential_topleft_order(d: int) -> np.ndarray:
    # Expanding square windows; the L-shaped increment of each step is
    # visited in row-major order.
    i, j = np.divmod(np.arange(d * d), d)
    return np.lexsort((j, i, np.maximum(i, j)))


def cumulative_energy(data: np.ndarray, ordering: str) -> EnergyCurve:
    """Cumulative squared-magnitude ratio under a coefficient ordering.

    `data` is any square 2D array of values (pixels or transform
    coefficients); each step adds one value's squared magnitude.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] != data.shape[1] or data.shape[0] < 1:
        raise ValueError(f"expected a square 2D array, got shape {data.shape}")
    if ordering not in ORDERINGS:
        raise ValueError(f"unknown ordering {ordering!r}; choose from {ORDERINGS}")
    sq = (data**2).ravel()
    total = sq.sum()
    if total == 0.0:
        raise ValueError("cumulative energy is undefined for an all-zero input")
    if ordering == "sequential-topleft":
        order = _sequential_topleft_order(data.shape[0])
    else:
        order = np.argsort(-sq, kind="stable")
    ratio = np.cumsum(sq[order]) / total
    ratio[-1] = 1.0
    return EnergyCurve(ordering=ordering, cumulative_ratio=ratio)


def attack_combination_logcount(d: int, l: int) -> float:
    """log10 of the number of position-index combinations an attacker must try.

    This is the falling factorial (d*d)! / (d*d - l)!, the count of ordered
    placements of l coefficients into a d-by-d grid when no positions are
    transmitted. Returned in log10 because the value overflows floats quickly.
    """
    if d < 1:
        raise ValueError("side length must be at least 1")
    if not 0 <= l <= d * d:
        raise ValueError(f"kept count {l} must lie in [0, {d * d}]")
    if l == 0:
        return 0.0
    terms = np.arange(d * d, d * d - l, -1, dtype=np.float64)
    return float(np.log10(terms).sum())


def block_byte_size(channels: int, s: int) -> int:
    """Serialized size of a block: fixed header plus float32 coefficients."""
    return BLOCK_HEADER_SIZE + 4 * channels * s * s


def encode_block(block: SpectralBlock) -> bytes:
    """Serialize a block to the little-endian wire format."""
    header = _HEADER.pack(
        BLOCK_MAGIC,
        BLOCK_VERSION,
        block.channels,
        block.window_side,
        block.original_side,
        block.class_label,
    )
    return header + block.window.astype("<f4").tobytes()


def decode_block(buf: bytes) -> SpectralBlock:
    """Parse wire bytes back into a SpectralBlock (coefficients as float64)."""
    if len(buf) < BLOCK_HEADER_SIZE:
        raise ValueError(f"buffer of {len(buf)} bytes is shorter than the {BLOCK_HEADER_SIZE}-byte header")
    magic, version, channels, s, original_side, label = _HEADER.unpack_from(buf)
    if magic != BLOCK_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != BLOCK_VERSION:
        raise ValueError(f"unsupported version {version}")
    expected = block_byte_size(channels, s)
    if len(buf) != expected:
        raise ValueError(f"buffer has {len(buf)} bytes, expected {expected}")
    window = (
        np.frombuffer(buf, dtype="<f4", offset=BLOCK_HEADER_SIZE)
        .astype(np.float64)
        .reshape(channels, s, s)
    )
    return SpectralBlock(window=window, original_side=original_side, class_label=label)
