"""Bit-exact sparse storage formats for quantized weight codes and spikes.

Every encoding is two bit streams: ``metadata`` (positions/run lengths) and
``payload`` (two's-complement values). Fields are written least significant
bit first. Layouts:

UBM  metadata: one presence bit per element; payload: the nonzero values.
CP   metadata: ceil(log2 n)-bit index per nonzero; payload: the nonzero values.
RLE  one entry per nonzero: (R-bit count of preceding zeros, value). A zero
     run longer than 2**R - 1 is split with (2**R - 1, 0) entries, each of
     which covers 2**R elements. Trailing zeros become a chain of (r, 0)
     entries covering exactly the remaining elements. Run fields go to the
     metadata stream, values to the payload stream.
UOP  payload: all n values, dense; metadata: (offset, length) of the span
     from the first to the last nonzero, each ceil(log2(n + 1)) bits.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class Format(str, enum.Enum):
    UBM = "ubm"
    UOP = "uop"
    CP = "cp"
    RLE = "rle"

    @classmethod
    def parse(cls, value: "str | Format") -> "Format":
        if isinstance(value, Format):
            return value
        return cls(str(value).lower())


# fixed preference used to break size ties
TIE_ORDER = (Format.RLE, Format.CP, Format.UBM, Format.UOP)
_FORMAT_CODES = {Format.UBM: 0, Format.UOP: 1, Format.CP: 2, Format.RLE: 3}


class CodecError(ValueError):
    """Malformed or truncated stream; ``bit_offset`` locates the problem."""

    def __init__(self, message: str, bit_offset: int, stream: str = "payload"):
        super().__init__(f"{message} ({stream} stream, bit {bit_offset})")
        self.bit_offset = bit_offset
        self.stream = stream


@dataclass(frozen=True)
class FormatParams:
    rle_bits: int = 4

    def __post_init__(self):
        if self.rle_bits < 1:
            raise ValueError("RLE run field needs at least one bit")


def index_bits(n: int) -> int:
    """ceil(log2 n), 0 for n <= 1."""
    return max(n - 1, 0).bit_length()


def uop_field_bits(n: int) -> int:
    """ceil(log2(n + 1))."""
    return int(n).bit_length()


@dataclass(frozen=True)
class SparseEncoding:
    format: Format
    n: int
    value_bits: int
    rle_bits: int
    metadata: np.ndarray  # uint8 array of 0/1 bits
    payload: np.ndarray

    @property
    def metadata_bits(self) -> int:
        return int(self.metadata.size)

    @property
    def payload_bits(self) -> int:
        return int(self.payload.size)

    @property
    def total_bits(self) -> int:
        return self.metadata_bits + self.payload_bits


# -- bit-field helpers ---------------------------------------------------------

def _pack_fields(values: np.ndarray, width: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    if width == 0 or values.size == 0:
        return np.zeros(0, dtype=np.uint8)
    unsigned = values & ((1 << width) - 1)
    bits = (unsigned[:, None] >> np.arange(width)) & 1
    return bits.astype(np.uint8).ravel()


def _unpack_fields(bits: np.ndarray, width: int, signed: bool) -> np.ndarray:
    if width == 0:
        return np.zeros(0, dtype=np.int64)
    fields = bits.reshape(-1, width).astype(np.int64)
    values = (fields << np.arange(width)).sum(axis=1)
    if signed:
        values = np.where(values >= 1 << (width - 1), values - (1 << width), values)
    return values


def _check_range(values: np.ndarray, value_bits: int) -> None:
    lo, hi = -(1 << (value_bits - 1)), (1 << (value_bits - 1)) - 1
    if values.size and (values.min() < lo or values.max() > hi):
        bad = values[(values < lo) | (values > hi)][0]
        raise ValueError(f"value {bad} does not fit {value_bits}-bit two's complement")


def rle_entries(values: np.ndarray, rle_bits: int) -> tuple[np.ndarray, np.ndarray]:
    """(run, value) entry arrays under the splitting and terminal-run rules."""
    values = np.asarray(values, dtype=np.int64).ravel()
    k = 1 << rle_bits
    runs, vals = [], []
    nz = np.flatnonzero(values)
    prev = -1
    for i in nz:
        z = int(i - prev - 1)
        pads, z = divmod(z, k)
        runs.extend([k - 1] * pads)
        vals.extend([0] * pads)
        runs.append(z)
        vals.append(int(values[i]))
        prev = int(i)
    tail = values.size - prev - 1
    while tail > 0:
        cover = min(tail, k)
        runs.append(cover - 1)
        vals.append(0)
        tail -= cover
    return np.asarray(runs, dtype=np.int64), np.asarray(vals, dtype=np.int64)


# -- public codec ----------------------------------------------------------------

def encode(values, fmt: "Format | str", value_bits: int, params: FormatParams = FormatParams()
           ) -> SparseEncoding:
    fmt = Format.parse(fmt)
    v = np.asarray(values).ravel()
    if v.size and not np.issubdtype(v.dtype, np.integer):
        if not np.all(v == np.round(v)):
            raise ValueError("sparse formats store integer codes")
    v = v.astype(np.int64)
    if value_bits < 1:
        raise ValueError("value_bits must be >= 1")
    if value_bits == 1:
        # 1-bit fields hold spikes: unsigned {0, 1}
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("1-bit values must be 0 or 1")
    else:
        _check_range(v, value_bits)
    n = v.size
    nz = np.flatnonzero(v)
    if fmt is Format.UBM:
        meta = (v != 0).astype(np.uint8)
        pay = _pack_fields(v[nz], value_bits)
    elif fmt is Format.CP:
        meta = _pack_fields(nz, index_bits(n))
        pay = _pack_fields(v[nz], value_bits)
    elif fmt is Format.RLE:
        runs, vals = rle_entries(v, params.rle_bits)
        meta = _pack_fields(runs, params.rle_bits)
        pay = _pack_fields(vals, value_bits)
    else:
        w = uop_field_bits(n)
        offset, length = (int(nz[0]), int(nz[-1] - nz[0] + 1)) if nz.size else (0, 0)
        meta = _pack_fields(np.array([offset, length]), w)
        pay = _pack_fields(v, value_bits)
    return SparseEncoding(fmt, n, value_bits, params.rle_bits, meta, pay)


def decode(enc: SparseEncoding) -> np.ndarray:
    fmt, n, vb = enc.format, enc.n, enc.value_bits
    meta, pay = np.asarray(enc.metadata, dtype=np.uint8), np.asarray(enc.payload, dtype=np.uint8)
    signed = vb > 1
    if pay.size % vb:
        raise CodecError(f"payload is not a whole number of {vb}-bit values",
                         pay.size - pay.size % vb)
    vals = _unpack_fields(pay, vb, signed)
    out = np.zeros(n, dtype=np.int64)
    if fmt is Format.UBM:
        if meta.size != n:
            raise CodecError(f"bitmask has {meta.size} bits for {n} elements",
                             min(meta.size, n), "metadata")
        nz = np.flatnonzero(meta)
        if nz.size != vals.size:
            off = min(nz.size, vals.size) * vb
            raise CodecError(f"bitmask marks {nz.size} values, payload holds {vals.size}", off)
        out[nz] = vals
    elif fmt is Format.CP:
        w = index_bits(n)
        if meta.size != vals.size * w:
            raise CodecError(f"expected {vals.size} {w}-bit indices", min(meta.size, vals.size * w),
                             "metadata")
        idx = _unpack_fields(meta, w, False) if w else np.zeros(vals.size, dtype=np.int64)
        if idx.size and (idx.max() >= n or np.any(np.diff(idx) <= 0)):
            bad = int(np.flatnonzero((idx >= n) | np.r_[False, np.diff(idx) <= 0])[0])
            raise CodecError(f"coordinate {idx[bad]} invalid for n={n}", bad * w, "metadata")
        out[idx] = vals
    elif fmt is Format.RLE:
        r = enc.rle_bits
        if meta.size != vals.size * r:
            raise CodecError(f"expected {vals.size} {r}-bit run fields",
                             min(meta.size, vals.size * r), "metadata")
        runs = _unpack_fields(meta, r, False)
        pos = 0
        for j, (run, val) in enumerate(zip(runs, vals)):
            pos += int(run)
            if pos >= n:
                raise CodecError(f"run overflows {n} elements", j * r, "metadata")
            out[pos] = val
            pos += 1
        if pos != n:
            raise CodecError(f"stream covers {pos} of {n} elements", meta.size, "metadata")
    else:
        w = uop_field_bits(n)
        if meta.size != 2 * w:
            raise CodecError("offset/length header truncated", meta.size, "metadata")
        if vals.size != n:
            raise CodecError(f"dense payload holds {vals.size} of {n} values",
                             min(vals.size, n) * vb)
        offset, length = _unpack_fields(meta, w, False) if w else (0, 0)
        out[:] = vals
        nz = np.flatnonzero(out)
        span = (int(nz[0]), int(nz[-1] - nz[0] + 1)) if nz.size else (0, 0)
        if span != (int(offset), int(length)):
            raise CodecError(f"header span {(int(offset), int(length))} disagrees with payload {span}",
                             0, "metadata")
    return out


# -- size accounting -------------------------------------------------------------

def size_bits(fmt: "Format | str", n: int, nnz: float, value_bits: int,
              params: FormatParams = FormatParams(), rle_entries_count: float | None = None
              ) -> tuple[float, float]:
    """(metadata_bits, payload_bits) from element and nonzero counts.

    RLE needs its entry count; when omitted the i.i.d. expectation for
    density ``nnz / n`` is used.
    """
    fmt = Format.parse(fmt)
    if fmt is Format.UBM:
        return float(n), nnz * value_bits
    if fmt is Format.CP:
        return nnz * index_bits(n), nnz * value_bits
    if fmt is Format.UOP:
        return 2.0 * uop_field_bits(n), float(n) * value_bits
    entries = rle_entries_count
    if entries is None:
        entries = expected_rle_entries(n, nnz / n if n else 0.0, params.rle_bits)
    return entries * params.rle_bits, entries * value_bits


def expected_rle_entries(n: int, density: float, rle_bits: int) -> float:
    """Expected RLE entry count for ``n`` i.i.d. elements nonzero w.p. ``density``.

    An entry ends at every nonzero, at every zero whose run length (so far)
    is a positive multiple of ``2**rle_bits``, and once more at the end when
    the trailing run length is not such a multiple.
    """
    if n <= 0:
        return 0.0
    p = min(max(float(density), 0.0), 1.0)
    q = 1.0 - p
    k = 1 << rle_bits
    total = n * p
    j = np.arange(k, n + 1, k, dtype=float)
    if j.size:
        total += float(np.sum((n - j) * q ** j * p + q ** j))
    # trailing run of length L: P(L = l) = q**l p for l < n, q**n for l = n
    ls = np.arange(1, n + 1, dtype=float)
    probs = q ** ls * p
    probs[-1] = q ** n
    total += float(np.sum(probs[(np.arange(1, n + 1) % k) != 0]))
    return total


def encoded_sizes(values, value_bits: int, params: FormatParams = FormatParams()) -> dict:
    """Exact total bits of every format for a concrete array."""
    v = np.asarray(values).ravel()
    n, nnz = v.size, int(np.count_nonzero(v))
    entries = rle_entries(v, params.rle_bits)[0].size
    return {f: sum(size_bits(f, n, nnz, value_bits, params, entries)) for f in Format}


def best_format(density: float, n: int, value_bits: int, params: FormatParams = FormatParams(),
                values=None) -> tuple[Format, float]:
    """Smallest format by total bits; ties resolved by ``TIE_ORDER``."""
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must lie in [0, 1]")
    if values is not None:
        sizes = encoded_sizes(values, value_bits, params)
    else:
        sizes = {f: sum(size_bits(f, n, density * n, value_bits, params)) for f in Format}
    fmt = min(TIE_ORDER, key=lambda f: (sizes[f], TIE_ORDER.index(f)))
    return fmt, sizes[fmt]


# -- container file ----------------------------------------------------------------

_MAGIC = b"SPEN"
_HEADER = struct.Struct("<4sBBIBBQQ")  # magic, version, format, n, value_bits, R, meta, payload


def to_bytes(enc: SparseEncoding) -> bytes:
    head = _HEADER.pack(_MAGIC, 1, _FORMAT_CODES[enc.format], enc.n, enc.value_bits,
                        enc.rle_bits, enc.metadata_bits, enc.payload_bits)
    return (head + np.packbits(enc.metadata, bitorder="little").tobytes()
            + np.packbits(enc.payload, bitorder="little").tobytes())


def from_bytes(blob: bytes) -> SparseEncoding:
    if len(blob) < _HEADER.size:
        raise CodecError("container header truncated", len(blob) * 8, "header")
    magic, version, code, n, vb, r, mbits, pbits = _HEADER.unpack_from(blob)
    if magic != _MAGIC or version != 1:
        raise CodecError("not a sparse-encoding container", 0, "header")
    fmt = {v: k for k, v in _FORMAT_CODES.items()}.get(code)
    if fmt is None:
        raise CodecError(f"unknown format code {code}", 8 * 5, "header")
    mbytes, pbytes = (mbits + 7) // 8, (pbits + 7) // 8
    body = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size)
    if body.size < mbytes + pbytes:
        raise CodecError("container body truncated", 8 * (_HEADER.size + body.size), "payload")
    meta = np.unpackbits(body[:mbytes], bitorder="little")[:mbits]
    pay = np.unpackbits(body[mbytes:mbytes + pbytes], bitorder="little")[:pbits]
    return SparseEncoding(fmt, n, vb, r, meta, pay)


def save(enc: SparseEncoding, path) -> None:
    Path(path).write_bytes(to_bytes(enc))


def load(path) -> SparseEncoding:
    return from_bytes(Path(path).read_bytes())
