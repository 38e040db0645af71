"""Series containers, Euclidean distance, synthetic data, and binary dataset I/O.

All stored collections keep their values exactly representable in IEEE-754
binary32 (the on-disk format), held in float64 arrays in memory. Every
distance and statistic is computed with 64-bit accumulation.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"LEAF"
FORMAT_VERSION = 1
HEADER_SIZE = 16

# Returned by euclidean_distance when the running squared sum exceeds the cap.
# Callers must treat it as "greater than the cap", never as a distance.
ABANDONED = math.inf

_ABANDON_CHUNK = 16


class FormatError(ValueError):
    """Malformed dataset file; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DegenerateSeriesError(ValueError):
    """Operation requires a series with nonzero sample variance."""


def as_series(values) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d series, got shape {arr.shape}")
    return arr


def quantize32(arr: np.ndarray) -> np.ndarray:
    """Round to binary32 precision and back, so values survive disk round-trips."""
    return np.asarray(arr, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class Dataset:
    """A collection of equal-length series; ids are the row positions 0..n-1."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"dataset values must be 2-d, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 2:
            raise ValueError(f"dataset needs n >= 1 and m >= 2, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("dataset contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class QuerySet:
    """Query series sharing the target dataset's length.

    noise_level/seed are generation metadata; they are not stored in the
    binary format and may be None for loaded sets.
    """

    values: np.ndarray
    noise_level: float | None = None
    seed: int | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"query values must be a non-empty 2-d array, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("query set contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.shape[0]


def euclidean_distance(a, b, abandon_at: float | None = None) -> float:
    """Euclidean distance with optional early abandoning.

    abandon_at is a cap on the squared distance; once the running squared sum
    exceeds it, ABANDONED is returned. Accumulation is chunked identically
    whether or not a cap is given, so accepted results are exact.
    """
    a = as_series(a)
    b = as_series(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"series lengths differ: {a.shape[0]} vs {b.shape[0]}")
    if abandon_at is not None and not abandon_at >= 0:
        raise ValueError(f"abandon_at must be >= 0, got {abandon_at}")
    cap = math.inf if abandon_at is None else float(abandon_at)
    total = 0.0
    for start in range(0, a.shape[0], _ABANDON_CHUNK):
        d = a[start : start + _ABANDON_CHUNK] - b[start : start + _ABANDON_CHUNK]
        total += float(np.dot(d, d))
        if total > cap:
            return ABANDONED
    return math.sqrt(total)


def batch_distances(queries: np.ndarray, block: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Distances between each query row and each block row, shape (q, b).

    Uses the direct (subtract, square, sum) form so identical rows yield an
    exact zero; chunked over queries to bound the broadcast buffer.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    block = np.atleast_2d(np.asarray(block, dtype=np.float64))
    out = np.empty((queries.shape[0], block.shape[0]), dtype=np.float64)
    for start in range(0, queries.shape[0], chunk):
        diff = queries[start : start + chunk, None, :] - block[None, :, :]
        out[start : start + chunk] = np.einsum("qbm,qbm->qb", diff, diff)
    return np.sqrt(out, out=out)


def scan_distances(q: np.ndarray, block: np.ndarray) -> np.ndarray:
    """Distances from one query to every row of a contiguous block."""
    diff = block - q
    d2 = np.einsum("ij,ij->i", diff, diff)
    return np.sqrt(d2, out=d2)


def znormalize(s) -> np.ndarray:
    """Shift/scale to mean 0 and sample standard deviation 1 (ddof=1)."""
    s = as_series(s)
    if s.shape[0] < 2:
        raise ValueError("znormalize needs at least 2 values")
    mu = float(s.mean())
    sd = float(s.std(ddof=1))
    if not sd > 0.0:
        raise DegenerateSeriesError("constant series cannot be z-normalized")
    return (s - mu) / sd


def generate_randwalk(n: int, m: int, seed: int) -> Dataset:
    """Random-walk series: cumulative sums of standard Gaussian steps, z-normalized."""
    if n < 1 or m < 2:
        raise ValueError(f"need n >= 1 and m >= 2, got n={n} m={m}")
    rng = np.random.default_rng(seed)
    walks = np.cumsum(rng.standard_normal((n, m)), axis=1)
    mu = walks.mean(axis=1, keepdims=True)
    sd = walks.std(axis=1, ddof=1, keepdims=True)
    if not (sd > 0).all():
        raise DegenerateSeriesError("degenerate random walk (zero variance)")
    return Dataset(quantize32((walks - mu) / sd))


def make_queries(src: Dataset, count: int, noise_level: float, seed: int) -> QuerySet:
    """Uniformly sampled source series plus i.i.d. Gaussian noise of the given level.

    Sources are unit-variance, so noise_level is the noise stdev relative to
    the data scale. Queries are not re-normalized after noise injection.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 0.0 <= noise_level <= 1.0:
        raise ValueError(f"noise_level must be in [0, 1], got {noise_level}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, src.n, size=count)
    noise = rng.standard_normal((count, src.m)) * noise_level
    return QuerySet(quantize32(src.values[idx] + noise), noise_level=noise_level, seed=seed)


def _save_matrix(values: np.ndarray, path) -> None:
    n, m = values.shape
    payload = values.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, n, m))
        fh.write(payload)


def _load_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError("truncated header", len(raw))
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", 0)
    version, n, m = struct.unpack("<III", raw[4:HEADER_SIZE])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    expected = HEADER_SIZE + 4 * n * m
    if len(raw) != expected:
        raise FormatError(
            f"file length {len(raw)} does not match header-implied {expected}",
            min(len(raw), expected),
        )
    values = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).astype(np.float64)
    return values.reshape(n, m)


def save_dataset(ds: Dataset, path) -> None:
    _save_matrix(ds.values, path)


def load_dataset(path) -> Dataset:
    return Dataset(_load_matrix(path))


def save_queries(qs: QuerySet, path) -> None:
    _save_matrix(qs.values, path)


def load_queries(path, noise_level: float | None = None, seed: int | None = None) -> QuerySet:
    return QuerySet(_load_matrix(path), noise_level=noise_level, seed=seed)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
