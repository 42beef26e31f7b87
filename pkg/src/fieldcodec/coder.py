"""Deterministic integer coding of latent codes.

PMF tables are tabulated from the cumulative density model in float64 with a
fixed evaluation order and quantized to 16-bit integer frequencies by
largest-remainder apportionment (per-symbol floor of 1), so identical model
bytes always produce identical tables.  Symbols are coded with a byte-wise
range coder (48-bit range register, byte carry resolution through a cached
byte and a pending-0xFF run), whose total terminal overhead is seven bytes;
values outside a table's support are escaped and followed by their raw
32 bits.

Bitstream container layout (little-endian):

    magic "VCNR", version u8, INR hash u64, quantizer hash u64,
    lambda tag u32 (float32 bits), item count u32
    per item: rank u8, dims u32 x rank, payload length u32, payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, FormatError, HashMismatch

PRECISION = 16
TOTAL = 1 << PRECISION
SUPPORT_MARGIN = 4

BITSTREAM_MAGIC = b"VCNR"
BITSTREAM_VERSION = 1
HEADER_SIZE = 4 + 1 + 8 + 8 + 4 + 4

_RANGE_BITS = 48
_RANGE_MASK = (1 << _RANGE_BITS) - 1
_NORM_THRESHOLD = 1 << (_RANGE_BITS - 8)
_FLUSH_BYTES = _RANGE_BITS // 8 + 1


def quantize(z):
    """Elementwise round to integers, ties away from zero."""
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("quantize requires finite inputs")
    return np.copysign(np.floor(np.abs(z) + 0.5), z).astype(np.int64)


@dataclass
class PMFTable:
    """Frequencies for one code dimension; the escape slot is last."""

    lo: int
    hi: int
    freqs: np.ndarray  # uint32, length hi-lo+2 (support plus escape)
    cum: np.ndarray  # uint64, length len(freqs)+1, cum[0] == 0

    @property
    def escape_freq(self):
        return int(self.freqs[-1])

    def symbol_of(self, value):
        if self.lo <= value <= self.hi:
            return int(value - self.lo)
        return len(self.freqs) - 1  # escape


def apportion_frequencies(probs, residual):
    """Largest-remainder apportionment of TOTAL among symbols plus escape.

    Every in-support symbol gets at least 1; the escape slot gets at least 1
    whenever there is residual mass (and exactly 0 when there is none).
    Deterministic: ties break toward lower indices.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.size
    if n == 0:
        raise ValueError("empty support")
    if n + 1 > TOTAL:
        raise ValueError(f"support of {n} symbols cannot fit {PRECISION}-bit tables")
    targets = np.concatenate([probs, [max(residual, 0.0)]]) * TOTAL
    base = np.floor(targets).astype(np.int64)
    base[:n] = np.maximum(base[:n], 1)
    if residual > 0.0:
        base[n] = max(base[n], 1)
    deficit = TOTAL - int(base.sum())
    if deficit > 0:
        remainders = targets - np.floor(targets)
        # stable sort on (-remainder, index): largest remainder, lowest index
        order = np.lexsort((np.arange(n + 1), -remainders))
        base[order[:deficit]] += 1
    elif deficit < 0:
        for _ in range(-deficit):
            candidates = np.where(base > 1)[0]
            take = candidates[np.argmax(base[candidates])]
            base[take] -= 1
    if base.sum() != TOTAL:
        raise AssertionError("apportionment must sum exactly to TOTAL")
    return base.astype(np.uint32)


def _finish_table(lo, hi, freqs):
    cum = np.zeros(len(freqs) + 1, dtype=np.uint64)
    np.cumsum(freqs, out=cum[1:])
    return PMFTable(lo=int(lo), hi=int(hi), freqs=freqs, cum=cum)


def build_pmf_tables(psi, support_lo, support_hi):
    """One table per code dimension from the cumulative model.

    Probabilities are the raw interval differences evaluated in float64 over
    the integer support; mass the support misses goes to the escape slot.
    """
    from .compressor import likelihood  # local import; compressor builds on coder

    support_lo = np.asarray(support_lo, dtype=np.int64)
    support_hi = np.asarray(support_hi, dtype=np.int64)
    if support_lo.shape != support_hi.shape:
        raise ValueError("support bounds must have matching shapes")
    if np.any(support_hi < support_lo):
        raise ValueError("support upper bounds must be >= lower bounds")
    dims = support_lo.size
    grid_lo = int(support_lo.min())
    grid_hi = int(support_hi.max())
    grid = np.arange(grid_lo, grid_hi + 1, dtype=np.float64)
    values = np.repeat(grid[:, None], dims, axis=1)
    probs = likelihood(psi, values, floor=0.0).data  # (len(grid), dims)
    tables = []
    for c in range(dims):
        lo, hi = int(support_lo[c]), int(support_hi[c])
        p = probs[lo - grid_lo : hi - grid_lo + 1, c]
        residual = max(0.0, 1.0 - float(p.sum()))
        freqs = apportion_frequencies(p, residual)
        tables.append(_finish_table(lo, hi, freqs))
    return tables


def uniform_byte_table():
    """256 equiprobable symbols; codes escaped raw bytes at exactly 8 bits."""
    freqs = np.full(256, TOTAL // 256, dtype=np.uint32)
    return _finish_table(0, 255, np.concatenate([freqs, [0]]).astype(np.uint32))


_BYTE_TABLE = uniform_byte_table()


class RangeEncoder:
    """Byte-wise range coder with carry resolution.

    ``low`` carries one bit above the 48-bit window; a carry increments the
    cached byte and flips any pending run of 0xFF bytes.  The stream always
    opens with the initial zero cache byte, and ``finish`` pads with exactly
    enough bytes for the decoder's lookahead: total overhead is 7 bytes.
    """

    def __init__(self):
        self.low = 0
        self.range = _RANGE_MASK
        self.cache = 0
        self.pending = 0
        self.started = False
        self.out = bytearray()

    def encode(self, cum_lo, freq):
        r = self.range >> PRECISION
        self.low += r * cum_lo
        self.range = r * freq
        while self.range < _NORM_THRESHOLD:
            self.range <<= 8
            self._shift_low()

    def _shift_low(self):
        top = self.low >> (_RANGE_BITS - 8)
        if top != 0xFF:  # carry (top > 0xFF) or settled byte: flush the cache
            carry = self.low >> _RANGE_BITS
            if self.started:
                self.out.append((self.cache + carry) & 0xFF)
            else:
                # a carry can never ripple past every emitted byte: the value
                # interval is bounded by the initial range
                assert carry == 0, "carry reached the stream head"
                self.out.append(0)
                self.started = True
            filler = (0xFF + carry) & 0xFF
            for _ in range(self.pending):
                self.out.append(filler)
            self.pending = 0
            self.cache = top & 0xFF
        else:
            self.pending += 1
        self.low = (self.low << 8) & _RANGE_MASK

    def finish(self):
        for _ in range(_FLUSH_BYTES):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    """Mirror of RangeEncoder; consumes exactly the bytes the encoder wrote."""

    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.range = _RANGE_MASK
        self.code = 0
        self._byte()  # the encoder's initial zero cache byte
        for _ in range(_RANGE_BITS // 8):
            self.code = (self.code << 8) | self._byte()

    def _byte(self):
        if self.pos >= len(self.data):
            raise DecodeError(
                f"coded payload truncated at byte {self.pos}", position=self.pos
            )
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, table: PMFTable):
        r = self.range >> PRECISION
        f = self.code // r
        if f >= TOTAL:
            f = TOTAL - 1
        idx = int(np.searchsorted(table.cum, f, side="right")) - 1
        cum_lo = int(table.cum[idx])
        freq = int(table.freqs[idx])
        if freq == 0:
            raise DecodeError(
                f"decoded zero-frequency symbol at byte {self.pos}", position=self.pos
            )
        self.code -= r * cum_lo
        self.range = r * freq
        while self.range < _NORM_THRESHOLD:
            self.range <<= 8
            self.code = (self.code << 8) | self._byte()
        return idx


def rc_encode(vectors, tables):
    """Range-code an (N, Z) integer array, dimension-interleaved.

    Out-of-support values cost an escape symbol plus their raw 32 bits; a
    table built with zero escape mass cannot escape and raises instead.
    """
    vectors = np.asarray(vectors, dtype=np.int64)
    if vectors.ndim != 2 or vectors.shape[1] != len(tables):
        raise ValueError(
            f"expected (N, {len(tables)}) symbols, got {vectors.shape}"
        )
    enc = RangeEncoder()
    for row in vectors:
        for c, table in enumerate(tables):
            v = int(row[c])
            idx = table.symbol_of(v)
            freq = int(table.freqs[idx])
            if freq == 0:
                raise ValueError(
                    f"value {v} outside support [{table.lo}, {table.hi}] "
                    "and table has no escape mass"
                )
            enc.encode(int(table.cum[idx]), freq)
            if idx == len(table.freqs) - 1:  # escape: raw little-endian int32
                for b in struct.pack("<i", v):
                    enc.encode(int(_BYTE_TABLE.cum[b]), int(_BYTE_TABLE.freqs[b]))
    return enc.finish()


def rc_decode(data, tables, count):
    """Decode ``count`` vectors previously produced by rc_encode."""
    dec = RangeDecoder(data)
    out = np.empty((count, len(tables)), dtype=np.int64)
    for i in range(count):
        for c, table in enumerate(tables):
            idx = dec.decode(table)
            if idx == len(table.freqs) - 1:
                raw = bytes(dec.decode(_BYTE_TABLE) for _ in range(4))
                out[i, c] = struct.unpack("<i", raw)[0]
            else:
                out[i, c] = table.lo + idx
    return out


def ideal_bits(vectors, tables):
    """Information content of the symbols under the integer tables, in bits."""
    vectors = np.asarray(vectors, dtype=np.int64)
    total = 0.0
    for row in vectors:
        for c, table in enumerate(tables):
            idx = table.symbol_of(int(row[c]))
            total += -np.log2(table.freqs[idx] / TOTAL)
            if idx == len(table.freqs) - 1:
                total += 32.0
    return total


# ---------------------------------------------------------------------------
# bitstream container


def pack_bitstream(items, inr_hash, quantizer_hash, lam):
    """items: iterable of (dims tuple, payload bytes)."""
    items = list(items)
    parts = [
        BITSTREAM_MAGIC,
        struct.pack(
            "<BQQII",
            BITSTREAM_VERSION,
            inr_hash,
            quantizer_hash,
            struct.unpack("<I", struct.pack("<f", lam))[0],
            len(items),
        ),
    ]
    for dims, payload in items:
        parts.append(struct.pack("<B", len(dims)))
        parts.append(struct.pack(f"<{len(dims)}I", *dims))
        parts.append(struct.pack("<I", len(payload)))
        parts.append(payload)
    return b"".join(parts)


def unpack_bitstream(data, expect_inr=None, expect_quantizer=None):
    """Returns (header dict, [(dims, payload), ...]); validates hashes."""
    if data[:4] != BITSTREAM_MAGIC:
        raise FormatError(f"bad bitstream magic {data[:4]!r}")
    version, inr_hash, quant_hash, lam_bits, count = struct.unpack_from(
        "<BQQII", data, 4
    )
    if version != BITSTREAM_VERSION:
        raise FormatError(f"unsupported bitstream version {version}")
    if expect_inr is not None and inr_hash != expect_inr:
        raise HashMismatch(
            f"bitstream was produced with model hash {inr_hash:#018x}, "
            f"supplied model has {expect_inr:#018x}",
            expected=expect_inr,
            actual=inr_hash,
        )
    if expect_quantizer is not None and quant_hash != expect_quantizer:
        raise HashMismatch(
            f"bitstream was produced with quantizer hash {quant_hash:#018x}, "
            f"supplied quantizer has {expect_quantizer:#018x}",
            expected=expect_quantizer,
            actual=quant_hash,
        )
    lam = struct.unpack("<f", struct.pack("<I", lam_bits))[0]
    header = {
        "version": version,
        "inr_hash": inr_hash,
        "quantizer_hash": quant_hash,
        "lam": lam,
        "count": count,
    }
    off = HEADER_SIZE
    items = []
    for _ in range(count):
        if off >= len(data):
            raise FormatError("bitstream ends inside item table")
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        (plen,) = struct.unpack_from("<I", data, off)
        off += 4
        payload = data[off : off + plen]
        if len(payload) != plen:
            raise FormatError("bitstream ends inside item payload")
        off += plen
        items.append((dims, payload))
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes in bitstream")
    return header, items
