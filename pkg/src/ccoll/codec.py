"""Absolute-error-bounded block codec for 32-bit float arrays.

Values are split into fixed blocks of :data:`BLOCK_SIZE` elements and each
block is stored as one of three record kinds:

* ``CONSTANT`` -- a single float32 representative.
* ``DENSE`` -- a float32 base plus m-bit unsigned offsets on a grid of
  spacing ``2 * eb``.
* ``RAW`` -- the original float32 values (non-finite data, or blocks whose
  grid would need more than 31 bits).

Every lossy decision is re-checked against the rounded float32 output, so the
bound ``|v - v'| <= eb`` holds for every finite input regardless of float32
rounding.  Non-finite values round-trip bit-exactly.

Two containers are provided.  ``CCZX`` is a monolithic stream; ``CCPX`` is a
chunked stream with a front index of per-chunk byte sizes so that
compression and decompression can be interleaved with other work through a
progress hook.  All integers and floats are little-endian.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

MAGIC = b"CCZX"
PIPELINED_MAGIC = b"CCPX"
VERSION = 1
BLOCK_SIZE = 128
DEFAULT_CHUNK_ELEMENTS = 5120
MAX_BITS = 31

CONSTANT = 0
DENSE = 1
RAW = 2

# magic, version, element_count, error_bound, block_size
_HEADER = struct.Struct("<4sBQdH")
# magic, chunk_elements, chunk_count
_PIPE_HEADER = struct.Struct("<4sII")

ProgressHook = Callable[[], None]


class CodecError(ValueError):
    """Raised for invalid codec arguments or malformed streams."""


@dataclass(frozen=True)
class StreamHeader:
    element_count: int
    error_bound: float
    block_size: int
    version: int = VERSION

    @property
    def block_count(self) -> int:
        return -(-self.element_count // self.block_size)


@dataclass(frozen=True)
class PipelinedHeader:
    chunk_elements: int
    chunk_count: int
    index: tuple

    @property
    def payload_offset(self) -> int:
        return _PIPE_HEADER.size + 4 * self.chunk_count


def check_error_bound(eb) -> float:
    try:
        eb = float(eb)
    except (TypeError, ValueError):
        raise CodecError(f"error bound must be a real number, got {eb!r}") from None
    if not math.isfinite(eb) or eb <= 0.0:
        raise CodecError(f"error bound must be positive and finite, got {eb!r}")
    return eb


def _as_field(field) -> np.ndarray:
    arr = np.ascontiguousarray(field, dtype=np.float32).reshape(-1)
    if arr.size == 0:
        raise CodecError("cannot compress an empty field")
    return arr


# ---------------------------------------------------------------------------
# block classification


def _classify(blocks: np.ndarray, eb: float):
    """Pick a record kind for each row of ``blocks`` (shape ``(nb, n)``).

    Returns ``(kinds, reps, bases, bits, q)``; ``q`` is only meaningful for
    dense rows.
    """
    nb = blocks.shape[0]
    v = blocks.astype(np.float64)
    finite = np.isfinite(blocks).all(axis=1)
    kinds = np.full(nb, RAW, dtype=np.uint8)
    reps = np.zeros(nb, dtype=np.float32)
    bases = np.zeros(nb, dtype=np.float32)
    bits = np.zeros(nb, dtype=np.uint8)
    q = np.zeros(blocks.shape, dtype=np.uint32)
    if not finite.any():
        return kinds, reps, bases, bits, q

    fv = v[finite]
    lo = fv.min(axis=1)
    hi = fv.max(axis=1)
    # Blocks that already span at most one error bound collapse to their
    # midpoint.  The threshold keeps any dense reconstruction (which spans at
    # least one full grid step) from collapsing on a second pass.
    const = (hi - lo) <= eb
    rep = ((lo + hi) * 0.5).astype(np.float32)
    with np.errstate(over="ignore", invalid="ignore"):
        const &= (np.abs(fv - rep.astype(np.float64)[:, None]) <= eb).all(axis=1)

    step = 2.0 * eb
    base = lo.astype(np.float32)
    with np.errstate(over="ignore", invalid="ignore"):
        qf = np.rint((fv - base.astype(np.float64)[:, None]) / step)
        qmax = qf.max(axis=1)
        dense = ~const & (qmax <= float(2**MAX_BITS - 1))
        qf = np.where(dense[:, None], qf, 0.0)
        recon = (base.astype(np.float64)[:, None] + qf * step).astype(np.float32)
        dense &= (np.abs(fv - recon.astype(np.float64)) <= eb).all(axis=1)
    qmax = np.where(dense, qmax, 0.0)
    m = np.maximum(1, np.ceil(np.log2(qmax + 1.0))).astype(np.uint8)

    idx = np.flatnonzero(finite)
    kinds[idx[const]] = CONSTANT
    reps[idx[const]] = rep[const]
    kinds[idx[dense]] = DENSE
    bases[idx[dense]] = base[dense]
    bits[idx[dense]] = m[dense]
    q[idx[dense]] = qf[dense].astype(np.uint32)
    return kinds, reps, bases, bits, q


def _pack(q: np.ndarray, m: int) -> bytes:
    shifts = np.arange(m - 1, -1, -1, dtype=np.uint32)
    bitmat = ((q[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitmat.reshape(-1)).tobytes()


def _unpack(buf: bytes, n: int, m: int) -> np.ndarray:
    bitarr = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=n * m)
    weights = np.left_shift(np.uint32(1), np.arange(m - 1, -1, -1, dtype=np.uint32))
    return bitarr.reshape(n, m).astype(np.uint32) @ weights


def _encode_blocks(arr: np.ndarray, eb: float, block_size: int) -> bytes:
    n = arr.size
    full = n // block_size
    rows = []
    if full:
        rows.append(arr[: full * block_size].reshape(full, block_size))
    if n % block_size:
        rows.append(arr[full * block_size:].reshape(1, -1))

    out = []
    for blocks in rows:
        kinds, reps, bases, bits, q = _classify(blocks, eb)
        width = blocks.shape[1]
        for i in range(blocks.shape[0]):
            kind = kinds[i]
            if kind == CONSTANT:
                out.append(struct.pack("<Bf", CONSTANT, reps[i]))
            elif kind == DENSE:
                m = int(bits[i])
                out.append(struct.pack("<BBf", DENSE, m, bases[i]))
                out.append(_pack(q[i, :width], m))
            else:
                out.append(bytes((RAW,)))
                out.append(blocks[i].astype("<f4").tobytes())
    return b"".join(out)


# ---------------------------------------------------------------------------
# monolithic stream


def compress(field, eb, block_size: int = BLOCK_SIZE) -> bytes:
    """Compress ``field`` so every finite value is reproduced within ``eb``."""
    arr = _as_field(field)
    eb = check_error_bound(eb)
    if not 0 < block_size < 2**16:
        raise CodecError(f"block size must fit in 16 bits, got {block_size}")
    header = _HEADER.pack(MAGIC, VERSION, arr.size, eb, block_size)
    return header + _encode_blocks(arr, eb, block_size)


def read_header(stream) -> StreamHeader:
    buf = memoryview(stream)
    if len(buf) < _HEADER.size:
        raise CodecError("truncated stream header")
    magic, version, count, eb, block_size = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CodecError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise CodecError(f"unsupported stream version {version}")
    if block_size == 0 or not (math.isfinite(eb) and eb > 0):
        raise CodecError("corrupt stream header")
    return StreamHeader(count, eb, block_size, version)


def decompress(stream) -> np.ndarray:
    """Decode a ``CCZX`` stream back into a float32 array."""
    buf = bytes(stream)
    header = read_header(buf)
    n, eb, bsize = header.element_count, header.error_bound, header.block_size
    step = 2.0 * eb
    out = np.empty(n, dtype=np.float32)
    pos = _HEADER.size
    end = len(buf)
    for b in range(header.block_count):
        lo = b * bsize
        width = min(bsize, n - lo)
        if pos >= end:
            raise CodecError(f"truncated stream at block {b}")
        kind = buf[pos]
        pos += 1
        if kind == CONSTANT:
            if pos + 4 > end:
                raise CodecError(f"truncated constant block {b}")
            out[lo:lo + width] = struct.unpack_from("<f", buf, pos)[0]
            pos += 4
        elif kind == DENSE:
            if pos + 5 > end:
                raise CodecError(f"truncated dense block {b}")
            m = buf[pos]
            base = struct.unpack_from("<f", buf, pos + 1)[0]
            pos += 5
            if not 1 <= m <= MAX_BITS:
                raise CodecError(f"invalid bit width {m} in block {b}")
            nbytes = -(-width * m // 8)
            if pos + nbytes > end:
                raise CodecError(f"truncated dense payload in block {b}")
            q = _unpack(buf[pos:pos + nbytes], width, m)
            pos += nbytes
            out[lo:lo + width] = (np.float64(base) + q.astype(np.float64) * step).astype(np.float32)
        elif kind == RAW:
            nbytes = 4 * width
            if pos + nbytes > end:
                raise CodecError(f"truncated raw block {b}")
            out[lo:lo + width] = np.frombuffer(buf, dtype="<f4", count=width, offset=pos)
            pos += nbytes
        else:
            raise CodecError(f"unknown block kind {kind} in block {b}")
    if pos != end:
        raise CodecError(f"{end - pos} trailing bytes after last block")
    return out


def block_kinds(stream) -> list:
    """List the record kind of every block in a ``CCZX`` stream."""
    buf = bytes(stream)
    header = read_header(buf)
    kinds = []
    pos = _HEADER.size
    for b in range(header.block_count):
        width = min(header.block_size, header.element_count - b * header.block_size)
        kind = buf[pos]
        kinds.append(kind)
        if kind == CONSTANT:
            pos += 5
        elif kind == DENSE:
            pos += 6 + -(-width * buf[pos + 1] // 8)
        else:
            pos += 1 + 4 * width
    return kinds


# ---------------------------------------------------------------------------
# pipelined stream


def _check_chunk_elements(chunk_elements: int, block_size: int) -> int:
    chunk_elements = int(chunk_elements)
    if chunk_elements <= 0 or chunk_elements % block_size:
        raise CodecError(
            f"chunk_elements must be a positive multiple of {block_size}, got {chunk_elements}"
        )
    if chunk_elements >= 2**32:
        raise CodecError("chunk_elements must fit in 32 bits")
    return chunk_elements


def chunk_bounds(n: int, chunk_elements: int) -> list:
    return [(lo, min(lo + chunk_elements, n)) for lo in range(0, n, chunk_elements)]


def iter_compress_chunks(field, eb, chunk_elements: int = DEFAULT_CHUNK_ELEMENTS) -> Iterator[bytes]:
    """Lazily compress ``field`` one chunk at a time.

    Each yielded payload is a self-contained ``CCZX`` stream, so chunks can
    be shipped or decoded independently as soon as they are produced.
    """
    arr = _as_field(field)
    eb = check_error_bound(eb)
    chunk_elements = _check_chunk_elements(chunk_elements, BLOCK_SIZE)
    for lo, hi in chunk_bounds(arr.size, chunk_elements):
        yield compress(arr[lo:hi], eb)


def pack_pipelined(chunk_elements: int, payloads) -> bytes:
    payloads = [bytes(p) for p in payloads]
    index = struct.pack(f"<{len(payloads)}I", *(len(p) for p in payloads))
    return _PIPE_HEADER.pack(PIPELINED_MAGIC, chunk_elements, len(payloads)) + index + b"".join(payloads)


def compress_pipelined(
    field,
    eb,
    chunk_elements: int = DEFAULT_CHUNK_ELEMENTS,
    hook: Optional[ProgressHook] = None,
) -> bytes:
    """Chunked compression with ``hook()`` called between consecutive chunks."""
    payloads = []
    for i, payload in enumerate(iter_compress_chunks(field, eb, chunk_elements)):
        if i and hook is not None:
            hook()
        payloads.append(payload)
    return pack_pipelined(chunk_elements, payloads)


def read_pipelined_header(stream) -> PipelinedHeader:
    buf = memoryview(stream)
    if len(buf) < _PIPE_HEADER.size:
        raise CodecError("truncated pipelined header")
    magic, chunk_elements, count = _PIPE_HEADER.unpack_from(buf, 0)
    if magic != PIPELINED_MAGIC:
        raise CodecError(f"bad magic {bytes(magic)!r}")
    if count == 0 or chunk_elements == 0:
        raise CodecError("pipelined stream has no chunks")
    if len(buf) < _PIPE_HEADER.size + 4 * count:
        raise CodecError("truncated chunk index")
    index = struct.unpack_from(f"<{count}I", buf, _PIPE_HEADER.size)
    return PipelinedHeader(chunk_elements, count, index)


def iter_pipelined_payloads(stream) -> Iterator[bytes]:
    """Walk the chunk payloads of a ``CCPX`` stream using its front index."""
    buf = bytes(stream)
    header = read_pipelined_header(buf)
    pos = header.payload_offset
    for i, size in enumerate(header.index):
        if pos + size > len(buf):
            raise CodecError(f"index entry {i} ({size} bytes) overruns the payload")
        yield buf[pos:pos + size]
        pos += size
    if pos != len(buf):
        raise CodecError(f"{len(buf) - pos} payload bytes not covered by the index")


def decompress_pipelined(stream, hook: Optional[ProgressHook] = None) -> np.ndarray:
    header = read_pipelined_header(stream)
    parts = []
    for i, payload in enumerate(iter_pipelined_payloads(stream)):
        if i and hook is not None:
            hook()
        part = decompress(payload)
        last = i == header.chunk_count - 1
        if part.size > header.chunk_elements or (not last and part.size != header.chunk_elements):
            raise CodecError(f"chunk {i} holds {part.size} values, expected {header.chunk_elements}")
        parts.append(part)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------


def element_count(stream) -> int:
    buf = bytes(stream)
    if buf[:4] == PIPELINED_MAGIC:
        return sum(read_header(p).element_count for p in iter_pipelined_payloads(buf))
    return read_header(buf).element_count


def decode(stream) -> np.ndarray:
    """Decode either container kind, dispatching on the magic."""
    if bytes(stream[:4]) == PIPELINED_MAGIC:
        return decompress_pipelined(stream)
    return decompress(stream)


def compression_ratio(stream) -> float:
    """Original bytes (4 per element) over total stream bytes."""
    size = len(stream)
    if size == 0:
        raise CodecError("empty stream")
    count = element_count(stream)
    if count == 0:
        raise CodecError("stream holds no elements")
    return count * 4 / size
