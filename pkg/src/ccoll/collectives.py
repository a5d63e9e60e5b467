"""Allgather, Bcast, Scatter, Reduce-scatter and Allreduce over the transport.

Three variants of each collective are provided:

``baseline``
    Plain float32 payloads; the codec is never called.
``cpr-p2p``
    Compress before every point-to-point send and decompress after every
    receive.  Data that travels several hops is recompressed at each hop, so
    both codec cost and error accumulate.
``ccoll``
    Data movement (allgather, bcast, scatter) compresses each block exactly
    once at its origin and forwards the compressed bytes untouched, so every
    output element is within ``eb`` of its input.  Computation
    (reduce-scatter) streams each round's payload chunk by chunk: every chunk
    is sent as soon as it is compressed and transport progress is polled
    between chunks, so transfers overlap the remaining codec work.

Every ``*_rank`` function runs inside :meth:`CommWorld.run` on one rank; the
top-level wrappers take per-rank inputs and return ``(outputs, report)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import codec
from .transport import (
    ALLGATHER,
    COMDECOM,
    MEMCPY,
    REDUCTION,
    WAIT,
    CommWorld,
    Endpoint,
)


class Variant(str, Enum):
    BASELINE = "baseline"
    CPR_P2P = "cpr-p2p"
    CCOLL = "ccoll"


class ReduceOp(str, Enum):
    SUM = "sum"
    MAX = "max"
    MIN = "min"
    AVG = "avg"


@dataclass(frozen=True)
class PipelineConfig:
    segment_bytes: int = 65536
    chunk_elements: int = codec.DEFAULT_CHUNK_ELEMENTS

    def __post_init__(self):
        if self.segment_bytes <= 0:
            raise ValueError("segment_bytes must be positive")
        if self.chunk_elements <= 0 or self.chunk_elements % codec.BLOCK_SIZE:
            raise ValueError(f"chunk_elements must be a positive multiple of {codec.BLOCK_SIZE}")


DEFAULT_CONFIG = PipelineConfig()


def apply_op(op: ReduceOp, incoming: np.ndarray, local: np.ndarray) -> np.ndarray:
    """Elementwise float32 reduction; AVG accumulates like SUM."""
    if op is ReduceOp.MAX:
        return np.maximum(incoming, local)
    if op is ReduceOp.MIN:
        return np.minimum(incoming, local)
    return np.add(incoming, local, dtype=np.float32)


# ---------------------------------------------------------------------------
# helpers shared by all rank functions


def _to_bytes(values: np.ndarray) -> bytes:
    return values.astype("<f4", copy=False).tobytes()


def _from_bytes(ep: Endpoint, data: bytes) -> np.ndarray:
    return ep.charge(MEMCPY, lambda: np.frombuffer(data, dtype="<f4").astype(np.float32),
                     ep.sim.memcpy_time(len(data)))


def _compress(ep: Endpoint, values: np.ndarray, eb: float) -> bytes:
    ep.stats.compress_calls += 1
    return ep.charge(COMDECOM, lambda: codec.compress(values, eb), ep.sim.compress_time(values.size))


def _decompress(ep: Endpoint, payload: bytes, count: int) -> np.ndarray:
    ep.stats.decompress_calls += 1
    return ep.charge(COMDECOM, lambda: codec.decompress(payload), ep.sim.decompress_time(count))


def binomial_tree(vrank: int, size: int):
    """Parent and children of ``vrank`` (relative to the root) in a binomial tree.

    Children are ``(child, span)`` pairs, largest subtree first; the child's
    subtree covers relative ranks ``[child, min(child + span, size))``.
    """
    parent = None
    mask = 1
    while mask < size:
        if vrank & mask:
            parent = vrank - mask
            break
        mask <<= 1
    children = []
    span = mask >> 1
    while span > 0:
        if vrank + span < size:
            children.append((vrank + span, span))
        span >>= 1
    return parent, children


def binomial_rounds(size: int) -> int:
    """Rounds on the critical path of a binomial tree over ``size`` ranks."""
    return (size - 1).bit_length()


def _pack_bundle(payloads) -> bytes:
    return struct.pack(f"<{len(payloads)}I", *(len(p) for p in payloads)) + b"".join(payloads)


def _unpack_bundle(data: bytes, count: int) -> list:
    sizes = struct.unpack_from(f"<{count}I", data, 0)
    pos = 4 * count
    out = []
    for size in sizes:
        out.append(data[pos:pos + size])
        pos += size
    if pos != len(data):
        raise ValueError("bundle size index does not match its payload")
    return out


# ---------------------------------------------------------------------------
# allgather


def allgather_rank(ep: Endpoint, variant, local, eb=None, config=DEFAULT_CONFIG,
                   category: str = ALLGATHER) -> np.ndarray:
    variant = Variant(variant)
    local = np.ascontiguousarray(local, dtype=np.float32).reshape(-1)
    if ep.size == 1:
        return local.copy()
    if variant is Variant.BASELINE:
        return _allgather_ring(ep, local, None, category)
    if variant is Variant.CPR_P2P:
        return _allgather_ring(ep, local, eb, category)
    return _allgather_ccoll(ep, local, eb, config, category)


def _allgather_ring(ep, local, eb, category):
    n, r = ep.size, ep.rank
    succ, pred = (r + 1) % n, (r - 1) % n
    tag = ep.new_tag()
    blocks = [None] * n
    blocks[r] = local
    for k in range(n - 1):
        send_idx, recv_idx = (r - k) % n, (r - k - 1) % n
        rreq = ep.irecv(pred, tag)
        if eb is None:
            payload = _to_bytes(blocks[send_idx])
        else:
            payload = _compress(ep, blocks[send_idx], eb)
        sreq = ep.isend(succ, tag, payload)
        data = ep.wait(rreq, category)
        ep.wait(sreq, category)
        if eb is None:
            blocks[recv_idx] = _from_bytes(ep, data)
        else:
            blocks[recv_idx] = _decompress(ep, data, local.size)
    return np.concatenate(blocks)


def _ring_allgather_ints(ep, value: int, category) -> list:
    n, r = ep.size, ep.rank
    succ, pred = (r + 1) % n, (r - 1) % n
    tag = ep.new_tag()
    values = [0] * n
    values[r] = value
    for k in range(n - 1):
        send_idx, recv_idx = (r - k) % n, (r - k - 1) % n
        rreq = ep.irecv(pred, tag, max_bytes=4)
        sreq = ep.isend(succ, tag, struct.pack("<I", values[send_idx]))
        values[recv_idx] = struct.unpack("<I", ep.wait(rreq, category))[0]
        ep.wait(sreq, category)
    return values


def _allgather_ccoll(ep, local, eb, config, category):
    """Compress once, exchange sizes, relay the compressed stream in fixed segments."""
    n, r = ep.size, ep.rank
    succ, pred = (r + 1) % n, (r - 1) % n
    own = _compress(ep, local, eb)
    sizes = _ring_allgather_ints(ep, len(own), category)
    total = sum(sizes)
    to_send = total - sizes[succ]
    to_recv = total - sizes[r]
    # A segment never exceeds the smallest compressed block, so the bytes a
    # rank forwards in round i always arrived in an earlier round.
    seg = max(1, min(config.segment_bytes, min(sizes)))
    n_send = -(-to_send // seg)
    n_recv = -(-to_recv // seg)
    incoming = bytearray()
    tag = ep.new_tag()
    for i in range(max(n_send, n_recv)):
        rreq = ep.irecv(pred, tag, max_bytes=seg) if i < n_recv else None
        sreq = None
        if i < n_send:
            lo, hi = i * seg, min((i + 1) * seg, to_send)
            if hi <= len(own):
                piece = own[lo:hi]
            elif lo >= len(own):
                piece = bytes(incoming[lo - len(own):hi - len(own)])
            else:
                piece = own[lo:] + bytes(incoming[:hi - len(own)])
            sreq = ep.isend(succ, tag, piece)
        if rreq is not None:
            incoming += ep.wait(rreq, category)
        if sreq is not None:
            ep.wait(sreq, category)

    # incoming holds blocks r-1, r-2, ..., r-n+1 back to back
    blocks = [None] * n
    blocks[r] = local
    pos = 0
    for k in range(1, n):
        src = (r - k) % n
        payload = bytes(incoming[pos:pos + sizes[src]])
        pos += sizes[src]
        blocks[src] = _decompress(ep, payload, local.size)
    return np.concatenate(blocks)


# ---------------------------------------------------------------------------
# bcast


def bcast_rank(ep: Endpoint, variant, root_field, root: int = 0, eb=None,
               count: Optional[int] = None) -> np.ndarray:
    """Binomial-tree broadcast; ``root_field`` is only read on the root."""
    variant = Variant(variant)
    n, r = ep.size, ep.rank
    vr = (r - root) % n
    parent, children = binomial_tree(vr, n)
    tag = ep.new_tag()
    if r == root:
        values = np.ascontiguousarray(root_field, dtype=np.float32).reshape(-1)
        count = values.size
        if n == 1:
            return values.copy()
        payload = None if variant is Variant.CPR_P2P else (
            _to_bytes(values) if variant is Variant.BASELINE else _compress(ep, values, eb))
    else:
        data = ep.wait(ep.irecv((parent + root) % n, tag), WAIT)
        if variant is Variant.BASELINE:
            values = _from_bytes(ep, data)
            payload = data
        else:
            values = _decompress(ep, data, count if count is not None else codec.element_count(data))
            payload = data if variant is Variant.CCOLL else None
    sends = []
    for child, _ in children:
        out = payload if payload is not None else _compress(ep, values, eb)
        sends.append(ep.isend((child + root) % n, tag, out))
    ep.waitall(sends, WAIT)
    return values


# ---------------------------------------------------------------------------
# scatter


def scatter_rank(ep: Endpoint, variant, root_field, root: int = 0, eb=None) -> np.ndarray:
    """Binomial-tree scatter of ``size`` equal slices of the root's field."""
    variant = Variant(variant)
    n, r = ep.size, ep.rank
    vr = (r - root) % n
    parent, children = binomial_tree(vr, n)
    span_end = n if parent is None else min(vr + (vr & -vr), n)
    count = span_end - vr
    tag = ep.new_tag()

    if r == root:
        arr = np.ascontiguousarray(root_field, dtype=np.float32).reshape(-1)
        if arr.size % n:
            raise ValueError(f"field of {arr.size} elements cannot be split over {n} ranks")
        slices = np.split(arr, n)
        # reorder by relative rank so every subtree is contiguous
        mine = [slices[(v + root) % n] for v in range(n)]
        if n == 1:
            return mine[0].copy()
        if variant is Variant.CCOLL:
            mine = [_compress(ep, s, eb) for s in mine]
    else:
        data = ep.wait(ep.irecv((parent + root) % n, tag), WAIT)
        if variant is Variant.BASELINE:
            mine = np.split(_from_bytes(ep, data), count)
        elif variant is Variant.CPR_P2P:
            flat = _decompress(ep, data, codec.element_count(data))
            mine = np.split(flat, count)
        else:
            mine = _unpack_bundle(data, count)

    sends = []
    for child, span in children:
        lo, hi = child - vr, min(child + span, n) - vr
        part = mine[lo:hi]
        if variant is Variant.BASELINE:
            payload = b"".join(_to_bytes(p) for p in part)
        elif variant is Variant.CPR_P2P:
            payload = _compress(ep, np.concatenate(part), eb)
        else:
            payload = _pack_bundle(part)
        sends.append(ep.isend((child + root) % n, tag, payload))
    ep.waitall(sends, WAIT)

    if variant is Variant.CCOLL:
        if r == root:
            return np.split(np.ascontiguousarray(root_field, dtype=np.float32).reshape(-1), n)[r].copy()
        own = mine[0]
        return _decompress(ep, own, codec.read_header(own).element_count)
    return np.asarray(mine[0], dtype=np.float32).copy()


# ---------------------------------------------------------------------------
# reduce-scatter


def reduce_scatter_rank(ep: Endpoint, variant, local, op=ReduceOp.SUM, eb=None,
                        config=DEFAULT_CONFIG) -> np.ndarray:
    """Ring reduce-scatter; rank ``r`` ends with slice ``r`` reduced over all ranks."""
    variant = Variant(variant)
    op = ReduceOp(op)
    n, r = ep.size, ep.rank
    local = np.ascontiguousarray(local, dtype=np.float32).reshape(-1)
    if local.size % n:
        raise ValueError(f"field of {local.size} elements cannot be split over {n} ranks")
    slices = np.split(local, n)
    if n == 1:
        acc = slices[0].copy()
    elif variant is Variant.CCOLL:
        acc = _reduce_scatter_pipelined(ep, slices, op, eb, config)
    else:
        acc = _reduce_scatter_ring(ep, slices, op, eb if variant is Variant.CPR_P2P else None)
    if op is ReduceOp.AVG:
        acc = ep.charge(REDUCTION, lambda: acc * np.float32(1.0 / n), ep.sim.reduce_time(acc.size))
    return acc


def _reduce(ep, op, incoming, local_slice):
    return ep.charge(REDUCTION, lambda: apply_op(op, incoming, local_slice),
                     ep.sim.reduce_time(local_slice.size))


def _reduce_scatter_ring(ep, slices, op, eb):
    """Baseline (``eb is None``) or compress-per-message ring."""
    n, r = ep.size, ep.rank
    succ, pred = (r + 1) % n, (r - 1) % n
    tag = ep.new_tag()
    width = slices[0].size
    outgoing = slices[(r - 1) % n]
    payload = _to_bytes(outgoing) if eb is None else _compress(ep, outgoing, eb)
    acc = None
    for k in range(n - 1):
        s_recv = (r - k - 2) % n
        rreq = ep.irecv(pred, tag)
        sreq = ep.isend(succ, tag, payload)
        data = ep.wait(rreq, WAIT)
        ep.wait(sreq, WAIT)
        incoming = _from_bytes(ep, data) if eb is None else _decompress(ep, data, width)
        acc = _reduce(ep, op, incoming, slices[s_recv])
        if k < n - 2:
            payload = _to_bytes(acc) if eb is None else _compress(ep, acc, eb)
    return acc


def _reduce_scatter_pipelined(ep, slices, op, eb, config):
    """Chunk-streamed ring: transfers overlap compression and decompression.

    Outgoing slices are compressed one chunk at a time and each chunk is
    posted as soon as it exists; incoming chunks are decoded as they arrive.
    Between chunks the rank polls its outstanding requests, which is the
    progress hook of the pipelined codec.
    """
    n, r = ep.size, ep.rank
    succ, pred = (r + 1) % n, (r - 1) % n
    tag = ep.new_tag()
    width = slices[0].size
    bounds = codec.chunk_bounds(width, config.chunk_elements)
    sends = []

    def stream_out(values):
        ep.stats.compress_calls += 1
        chunks = codec.iter_compress_chunks(values, eb, config.chunk_elements)
        for j, (lo, hi) in enumerate(bounds):
            if j:
                ep.poll()
            payload = ep.charge(COMDECOM, lambda: next(chunks), ep.sim.compress_time(hi - lo))
            sends.append(ep.isend(succ, tag, payload))

    recvs = [ep.irecv(pred, tag) for _ in bounds]
    stream_out(slices[(r - 1) % n])
    acc = None
    for k in range(n - 1):
        s_recv = (r - k - 2) % n
        incoming = np.empty(width, dtype=np.float32)
        ep.stats.decompress_calls += 1
        for j, (lo, hi) in enumerate(bounds):
            if j:
                ep.poll()
            data = ep.wait(recvs[j], WAIT)
            incoming[lo:hi] = ep.charge(COMDECOM, lambda: codec.decompress(data),
                                        ep.sim.decompress_time(hi - lo))
        acc = _reduce(ep, op, incoming, slices[s_recv])
        if k < n - 2:
            recvs = [ep.irecv(pred, tag) for _ in bounds]
            stream_out(acc)
    ep.waitall(sends, WAIT)
    return acc


# ---------------------------------------------------------------------------
# allreduce


def allreduce_rank(ep: Endpoint, variant, local, op=ReduceOp.SUM, eb=None,
                   config=DEFAULT_CONFIG) -> np.ndarray:
    """Ring reduce-scatter followed by ring allgather of the reduced slices."""
    mine = reduce_scatter_rank(ep, variant, local, op, eb, config)
    if ep.size == 1:
        return mine
    return allgather_rank(ep, variant, mine, eb, config, ALLGATHER)


# ---------------------------------------------------------------------------
# whole-world wrappers


def _check_eb(variant: Variant, eb):
    if variant is Variant.BASELINE:
        return None
    if eb is None:
        raise ValueError(f"variant {variant.value!r} requires an error bound")
    return codec.check_error_bound(eb)


def _check_fields(fields, size: int, divisible: bool = False):
    if len(fields) != size:
        raise ValueError(f"expected {size} per-rank fields, got {len(fields)}")
    arrs = [np.ascontiguousarray(f, dtype=np.float32).reshape(-1) for f in fields]
    lengths = {a.size for a in arrs}
    if len(lengths) != 1:
        raise ValueError(f"per-rank fields have mismatched lengths {sorted(lengths)}")
    length = lengths.pop()
    if length == 0:
        raise ValueError("fields must be non-empty")
    if divisible and length % size:
        raise ValueError(f"field of {length} elements cannot be split over {size} ranks")
    return arrs


def _check_root(root: int, size: int):
    if not isinstance(root, (int, np.integer)) or not 0 <= root < size:
        raise ValueError(f"invalid root {root!r} for world of size {size}")
    return int(root)


def allgather(world: CommWorld, variant, fields, eb=None, config=DEFAULT_CONFIG):
    variant = Variant(variant)
    eb = _check_eb(variant, eb)
    arrs = _check_fields(fields, world.size)
    return world.run(lambda ep: allgather_rank(ep, variant, arrs[ep.rank], eb, config))


def bcast(world: CommWorld, variant, root_field, root: int = 0, eb=None):
    variant = Variant(variant)
    eb = _check_eb(variant, eb)
    root = _check_root(root, world.size)
    arr = np.ascontiguousarray(root_field, dtype=np.float32).reshape(-1)
    if arr.size == 0:
        raise ValueError("field must be non-empty")
    return world.run(lambda ep: bcast_rank(ep, variant, arr if ep.rank == root else None,
                                           root, eb, arr.size))


def scatter(world: CommWorld, variant, root_field, root: int = 0, eb=None):
    variant = Variant(variant)
    eb = _check_eb(variant, eb)
    root = _check_root(root, world.size)
    arr = np.ascontiguousarray(root_field, dtype=np.float32).reshape(-1)
    if arr.size == 0 or arr.size % world.size:
        raise ValueError(f"field of {arr.size} elements cannot be split over {world.size} ranks")
    return world.run(lambda ep: scatter_rank(ep, variant, arr if ep.rank == root else None, root, eb))


def reduce_scatter(world: CommWorld, variant, fields, op=ReduceOp.SUM, eb=None,
                   config=DEFAULT_CONFIG):
    variant = Variant(variant)
    op = ReduceOp(op)
    eb = _check_eb(variant, eb)
    arrs = _check_fields(fields, world.size, divisible=True)
    return world.run(lambda ep: reduce_scatter_rank(ep, variant, arrs[ep.rank], op, eb, config))


def allreduce(world: CommWorld, variant, fields, op=ReduceOp.SUM, eb=None,
              config=DEFAULT_CONFIG):
    variant = Variant(variant)
    op = ReduceOp(op)
    eb = _check_eb(variant, eb)
    arrs = _check_fields(fields, world.size, divisible=True)
    return world.run(lambda ep: allreduce_rank(ep, variant, arrs[ep.rank], op, eb, config))
