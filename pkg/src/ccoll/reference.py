"""Single-process references for the collectives, computed without a transport.

Reductions use the same fixed association order as the ring: slice ``s`` is
accumulated starting at rank ``s + 1`` and walking forward around the ring,
ending with rank ``s`` itself, all in float32.
"""

from __future__ import annotations

import numpy as np

from .collectives import ReduceOp, apply_op


def allgather(fields):
    return np.concatenate([np.asarray(f, dtype=np.float32) for f in fields])


def bcast(root_field):
    return np.asarray(root_field, dtype=np.float32).copy()


def scatter(root_field, size):
    arr = np.asarray(root_field, dtype=np.float32)
    return [s.copy() for s in np.split(arr, size)]


def reduce_scatter(fields, op):
    op = ReduceOp(op)
    size = len(fields)
    slices = [np.split(np.asarray(f, dtype=np.float32), size) for f in fields]
    out = []
    for s in range(size):
        acc = slices[(s + 1) % size][s].copy()
        for step in range(2, size + 1):
            acc = apply_op(op, acc, slices[(s + step) % size][s])
        if op is ReduceOp.AVG:
            acc = acc * np.float32(1.0 / size)
        out.append(acc)
    return out


def allreduce(fields, op):
    return np.concatenate(reduce_scatter(fields, op))
