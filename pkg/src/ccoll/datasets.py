"""Synthetic scientific-like fields and raw float32 file I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np


class Kind(str, Enum):
    SINUSOID_MIX = "sinusoid-mix"
    GAUSSIAN_BLOBS = "gaussian-blobs"
    RAMP = "ramp"
    CONSTANT = "constant"
    FILE = "file"


@dataclass(frozen=True)
class DatasetSpec:
    kind: Kind
    elements: int
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.FILE and not self.path:
            raise ValueError("kind 'file' needs a path")
        if self.kind is not Kind.FILE and self.elements < 1:
            raise ValueError(f"elements must be positive, got {self.elements}")


def sinusoid_mix(elements: int, rng: np.random.Generator, terms: int = 4) -> np.ndarray:
    # periods of thousands of samples keep 128-value blocks narrow
    x = np.arange(elements, dtype=np.float64)
    out = np.zeros(elements)
    for _ in range(terms):
        period = rng.uniform(2000.0, 40000.0)
        amp = rng.uniform(0.2, 1.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        out += amp * np.sin(2 * np.pi * x / period + phase)
    return out.astype(np.float32)


def gaussian_blobs(elements: int, rng: np.random.Generator, blobs: int = 6) -> np.ndarray:
    x = np.arange(elements, dtype=np.float64)
    out = np.zeros(elements)
    for _ in range(blobs):
        center = rng.uniform(0, elements)
        width = rng.uniform(0.02, 0.2) * max(elements, 64)
        amp = rng.uniform(-1.0, 1.0)
        out += amp * np.exp(-0.5 * ((x - center) / width) ** 2)
    return out.astype(np.float32)


def generate(spec: DatasetSpec) -> np.ndarray:
    """Deterministic field for ``spec``; same seed, same values."""
    if spec.kind is Kind.FILE:
        data = read_raw(spec.path)
        if spec.elements and data.size < spec.elements:
            raise ValueError(f"{spec.path} holds {data.size} values, {spec.elements} requested")
        return data[: spec.elements] if spec.elements else data
    rng = np.random.default_rng(spec.seed)
    n = spec.elements
    if spec.kind is Kind.SINUSOID_MIX:
        return sinusoid_mix(n, rng)
    if spec.kind is Kind.GAUSSIAN_BLOBS:
        return gaussian_blobs(n, rng)
    if spec.kind is Kind.RAMP:
        return np.linspace(0.0, 1.0, n, dtype=np.float64).astype(np.float32)
    return np.full(n, np.float32(rng.uniform(-1.0, 1.0)), dtype=np.float32)


def rank_fields(spec: DatasetSpec, ranks: int, elements: int) -> list:
    """One field per rank.  Synthetic kinds reseed per rank; files are windowed."""
    if spec.kind is Kind.FILE:
        data = read_raw(spec.path)
        if data.size < elements:
            raise ValueError(f"{spec.path} holds {data.size} values, {elements} needed per rank")
        slack = data.size - elements
        return [data[(r * elements) % (slack + 1):][:elements].copy() for r in range(ranks)]
    return [generate(DatasetSpec(spec.kind, elements, spec.seed + r)) for r in range(ranks)]


def read_raw(path) -> np.ndarray:
    """Headerless little-endian float32 dump."""
    size = os.path.getsize(path)
    if size % 4:
        raise ValueError(f"{path}: size {size} is not a multiple of 4 bytes")
    return np.fromfile(path, dtype="<f4").astype(np.float32)


def write_raw(path, values) -> None:
    np.ascontiguousarray(values, dtype="<f4").tofile(path)
