"""Update compression: random sparsification + unbiased stochastic quantization.

The pipeline keeps ``k`` of ``d`` coordinates uniformly at random, rescales
them by ``d/k`` (so the sparsifier is unbiased), then quantizes magnitudes
onto ``2^(b-1)-1`` uniform levels of the update's l2 norm with stochastic
rounding; one bit per entry carries the sign.  The bit-width ``b`` adapts
per update: 8 bits while the update still moves more than a threshold
against the previous round's, 4 bits once it settles.

The wire format is little-endian: magic ``SFCU``, version u8, client_id
u32, round u32, b u8, d_w u32, k u32, l2 norm as IEEE-754 float32, then a
packed bitstream of k records of (index: 32 bits, sign: 1 bit, code: b-1
bits), MSB-first within the stream, zero-padded to a byte boundary.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .domain import SeededRng

WIRE_MAGIC = b"SFCU"
WIRE_VERSION = 1
_HEADER_FMT = "<4sBIIBIIf"
HEADER_BYTES = struct.calcsize(_HEADER_FMT)  # 26
SUPPORTED_BITWIDTHS = (4, 8)


class WireFormatError(ValueError):
    """Raised on malformed or truncated wire encodings."""


@dataclass(frozen=True)
class CompressedUpdate:
    """Sparsified, quantized model update with exact wire semantics.

    ``l2_norm`` is float32 (it rides the wire as one); decoded values are
    ``l2_norm * sign * code / levels`` at each kept index.  The
    sparsification scale is already baked into the encoded magnitudes.
    """

    client_id: int
    round: int
    bit_width: int
    dim: int
    kept_count: int
    l2_norm: float
    indices: np.ndarray   # uint32, strictly increasing
    signs: np.ndarray     # uint8, 1 = negative
    codes: np.ndarray     # uint16, in [0, levels]

    @property
    def levels(self) -> int:
        return quantization_levels(self.bit_width)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CompressedUpdate):
            return NotImplemented
        return (self.client_id == other.client_id and self.round == other.round
                and self.bit_width == other.bit_width and self.dim == other.dim
                and self.kept_count == other.kept_count
                and struct.pack("<f", self.l2_norm) == struct.pack("<f", other.l2_norm)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.signs, other.signs)
                and np.array_equal(self.codes, other.codes))


def quantization_levels(bit_width: int) -> int:
    """Number of uniform magnitude intervals: 2^(b-1) - 1 (one bit is the sign)."""
    if bit_width not in SUPPORTED_BITWIDTHS:
        raise ValueError(f"bit_width must be one of {SUPPORTED_BITWIDTHS}, got {bit_width}")
    return 2 ** (bit_width - 1) - 1


def sparsify(delta: np.ndarray, k: int, rng: SeededRng) -> np.ndarray:
    """Keep k coordinates uniformly at random, scaled by d/k; zero the rest."""
    d = delta.shape[0]
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    kept = rng.gen.choice(d, size=k, replace=False)
    out = np.zeros_like(delta, dtype=np.float64)
    out[kept] = delta[kept] * (d / k)
    return out


def select_bitwidth(delta: np.ndarray, prev_delta: np.ndarray, threshold: float) -> int:
    """8 bits while the max-abs coordinate change since last round exceeds the threshold, else 4."""
    if delta.shape != prev_delta.shape:
        raise ValueError("delta and prev_delta must have the same dimension")
    diff = float(np.max(np.abs(delta - prev_delta))) if delta.size else 0.0
    return 8 if diff > threshold else 4


def stochastic_round_levels(r: np.ndarray, levels: int, rng: SeededRng) -> np.ndarray:
    """Map normalized magnitudes in [0,1] onto integer level codes.

    A value between adjacent level boundaries rounds down or up with
    probability proportional to its distance from each; a value exactly on
    a boundary maps there deterministically.
    """
    level_float = np.minimum(np.asarray(r, dtype=np.float64) * levels, float(levels))
    low = np.floor(level_float)
    frac = level_float - low
    up = rng.gen.random(level_float.shape) < frac
    return (low + up).astype(np.uint16)


def quantize(sparse: np.ndarray, bit_width: int, rng: SeededRng,
             client_id: int = 0, round_index: int = 0) -> CompressedUpdate:
    """Encode the nonzero entries of a (sparsified) update.

    An all-zero vector encodes to kept_count 0 with zero norm, which
    decodes back to the zero vector.
    """
    levels = quantization_levels(bit_width)
    indices = np.flatnonzero(sparse).astype(np.uint32)
    if indices.size == 0:
        return CompressedUpdate(client_id=client_id, round=round_index,
                                bit_width=bit_width, dim=sparse.shape[0],
                                kept_count=0, l2_norm=0.0,
                                indices=indices,
                                signs=np.zeros(0, dtype=np.uint8),
                                codes=np.zeros(0, dtype=np.uint16))
    values = sparse[indices]
    norm32 = np.float32(np.linalg.norm(values))
    norm = float(norm32)
    r = np.abs(values) / norm
    codes = stochastic_round_levels(r, levels, rng)
    signs = (values < 0).astype(np.uint8)
    return CompressedUpdate(client_id=client_id, round=round_index,
                            bit_width=bit_width, dim=sparse.shape[0],
                            kept_count=int(indices.size), l2_norm=norm,
                            indices=indices, signs=signs, codes=codes)


def decode(cu: CompressedUpdate) -> np.ndarray:
    """Reconstruct the dense update: norm * sign * code/levels at kept indices."""
    out = np.zeros(cu.dim, dtype=np.float64)
    if cu.kept_count == 0:
        return out
    if np.any(cu.indices[1:] <= cu.indices[:-1]) or int(cu.indices[-1]) >= cu.dim:
        raise WireFormatError("indices must be strictly increasing and < dim")
    sign = 1.0 - 2.0 * cu.signs.astype(np.float64)
    out[cu.indices] = cu.l2_norm * sign * (cu.codes.astype(np.float64) / cu.levels)
    return out


def compress_update(delta: np.ndarray, prev_delta: np.ndarray, k: int,
                    threshold: float, rng: SeededRng,
                    client_id: int = 0, round_index: int = 0) -> CompressedUpdate:
    """Full pipeline: adaptive bit-width, random-k sparsify, quantize."""
    bit_width = select_bitwidth(delta, prev_delta, threshold)
    sparse = sparsify(delta, k, rng)
    return quantize(sparse, bit_width, rng, client_id=client_id, round_index=round_index)


# --------------------------------------------------------------------------
# Wire format
# --------------------------------------------------------------------------

class _BitWriter:
    """MSB-first bit packer."""

    def __init__(self) -> None:
        self._buf = bytearray()
        self._acc = 0
        self._nbits = 0

    def write(self, value: int, width: int) -> None:
        self._acc = (self._acc << width) | (value & ((1 << width) - 1))
        self._nbits += width
        while self._nbits >= 8:
            self._nbits -= 8
            self._buf.append((self._acc >> self._nbits) & 0xFF)
        self._acc &= (1 << self._nbits) - 1

    def finish(self) -> bytes:
        if self._nbits:
            self._buf.append((self._acc << (8 - self._nbits)) & 0xFF)
            self._acc = 0
            self._nbits = 0
        return bytes(self._buf)


class _BitReader:
    """MSB-first bit unpacker over a fixed buffer."""

    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0
        self._acc = 0
        self._nbits = 0

    def read(self, width: int) -> int:
        while self._nbits < width:
            if self._pos >= len(self._data):
                raise WireFormatError("truncated bitstream")
            self._acc = (self._acc << 8) | self._data[self._pos]
            self._pos += 1
            self._nbits += 8
        self._nbits -= width
        value = (self._acc >> self._nbits) & ((1 << width) - 1)
        self._acc &= (1 << self._nbits) - 1
        return value


def wire_size(kept_count: int, bit_width: int) -> int:
    """Exact encoded byte count: header + packed records."""
    return HEADER_BYTES + (kept_count * (32 + bit_width) + 7) // 8


def encode_wire(cu: CompressedUpdate) -> bytes:
    """Serialize to the binary wire layout."""
    levels = cu.levels
    header = struct.pack(_HEADER_FMT, WIRE_MAGIC, WIRE_VERSION, cu.client_id,
                         cu.round, cu.bit_width, cu.dim, cu.kept_count,
                         cu.l2_norm)
    writer = _BitWriter()
    code_bits = cu.bit_width - 1
    for idx, sign, code in zip(cu.indices, cu.signs, cu.codes):
        if code > levels:
            raise WireFormatError(f"code {int(code)} exceeds level count {levels}")
        writer.write(int(idx), 32)
        writer.write(int(sign), 1)
        writer.write(int(code), code_bits)
    return header + writer.finish()


def decode_wire(data: bytes) -> CompressedUpdate:
    """Parse a wire encoding; raises WireFormatError rather than partially decoding."""
    if len(data) < HEADER_BYTES:
        raise WireFormatError("truncated header")
    magic, version, client_id, round_index, bit_width, dim, kept, norm = \
        struct.unpack_from(_HEADER_FMT, data)
    if magic != WIRE_MAGIC:
        raise WireFormatError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise WireFormatError(f"unsupported version {version}")
    if bit_width not in SUPPORTED_BITWIDTHS:
        raise WireFormatError(f"unsupported bit width {bit_width}")
    if kept > dim:
        raise WireFormatError(f"kept count {kept} exceeds dimension {dim}")
    expected = wire_size(kept, bit_width)
    if len(data) != expected:
        raise WireFormatError(f"payload length {len(data)} != expected {expected}")
    levels = quantization_levels(bit_width)
    reader = _BitReader(data[HEADER_BYTES:])
    code_bits = bit_width - 1
    indices = np.zeros(kept, dtype=np.uint32)
    signs = np.zeros(kept, dtype=np.uint8)
    codes = np.zeros(kept, dtype=np.uint16)
    prev = -1
    for j in range(kept):
        idx = reader.read(32)
        if idx <= prev or idx >= dim:
            raise WireFormatError("indices must be strictly increasing and < dim")
        prev = idx
        indices[j] = idx
        signs[j] = reader.read(1)
        code = reader.read(code_bits)
        if code > levels:
            raise WireFormatError(f"code {code} exceeds level count {levels}")
        codes[j] = code
    return CompressedUpdate(client_id=client_id, round=round_index,
                            bit_width=bit_width, dim=dim, kept_count=kept,
                            l2_norm=norm, indices=indices, signs=signs,
                            codes=codes)
