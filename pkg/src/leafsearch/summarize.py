"""Fixed-segmentation mean summaries, node envelopes, and the pruning lower bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .series import as_series

DEFAULT_NUM_SEGMENTS = 8


@dataclass(frozen=True)
class SegmentConfig:
    """Equal-width split of a series of given length into contiguous segments.

    Widths differ by at most one; the leading segments take the remainder.
    """

    length: int
    num_segments: int
    starts: np.ndarray = field(repr=False, compare=False, default=None)
    widths: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.num_segments < 1 or self.num_segments > self.length:
            raise ValueError(
                f"num_segments must be in [1, length], got {self.num_segments} for length {self.length}"
            )
        base, rem = divmod(self.length, self.num_segments)
        widths = np.full(self.num_segments, base, dtype=np.int64)
        widths[:rem] += 1
        starts = np.concatenate(([0], np.cumsum(widths)[:-1]))
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "widths", widths)


def segment_config(length: int, num_segments: int = DEFAULT_NUM_SEGMENTS) -> SegmentConfig:
    return SegmentConfig(length=length, num_segments=num_segments)


def summarize_series(s, cfg: SegmentConfig) -> np.ndarray:
    """Per-segment arithmetic means of one series."""
    s = as_series(s)
    if s.shape[0] != cfg.length:
        raise ValueError(f"series length {s.shape[0]} does not match config length {cfg.length}")
    return np.add.reduceat(s, cfg.starts) / cfg.widths


def summarize_matrix(values: np.ndarray, cfg: SegmentConfig) -> np.ndarray:
    """Per-segment means for every row; shape (n, num_segments)."""
    if values.shape[1] != cfg.length:
        raise ValueError(f"row length {values.shape[1]} does not match config length {cfg.length}")
    return np.add.reduceat(values, cfg.starts, axis=1) / cfg.widths


class NodeEnvelope:
    """Element-wise [min, max] bounds over the segment means of member series.

    Mutated only during single-threaded index construction; treated as
    immutable afterwards.
    """

    __slots__ = ("mean_min", "mean_max")

    def __init__(self, mean_min: np.ndarray, mean_max: np.ndarray):
        self.mean_min = np.asarray(mean_min, dtype=np.float64)
        self.mean_max = np.asarray(mean_max, dtype=np.float64)

    @classmethod
    def empty(cls, num_segments: int) -> "NodeEnvelope":
        return cls(np.full(num_segments, math.inf), np.full(num_segments, -math.inf))

    @classmethod
    def from_rows(cls, summaries: np.ndarray) -> "NodeEnvelope":
        return cls(summaries.min(axis=0), summaries.max(axis=0))

    def copy(self) -> "NodeEnvelope":
        return NodeEnvelope(self.mean_min.copy(), self.mean_max.copy())

    def contains(self, means: np.ndarray) -> bool:
        return bool((self.mean_min <= means).all() and (means <= self.mean_max).all())

    def width(self) -> np.ndarray:
        return self.mean_max - self.mean_min


def envelope_insert(env: NodeEnvelope, means: np.ndarray) -> NodeEnvelope:
    """Widen env in place to cover the given segment means; returns env."""
    np.minimum(env.mean_min, means, out=env.mean_min)
    np.maximum(env.mean_max, means, out=env.mean_max)
    return env


def lower_bound_from_summary(qsumm: np.ndarray, env: NodeEnvelope, cfg: SegmentConfig) -> float:
    """Lower bound on the distance from the summarized query to any member series.

    Per segment, the gap between the query's segment mean and the envelope
    interval, weighted by segment width: sqrt(sum_i w_i * gap_i^2). Sound
    because within one segment sum_t (q_t - s_t)^2 >= w * (mu_q - mu_s)^2 and
    every member's mu_s lies inside the envelope.
    """
    gap = np.maximum(env.mean_min - qsumm, qsumm - env.mean_max)
    np.maximum(gap, 0.0, out=gap)
    return math.sqrt(float(np.dot(cfg.widths * gap, gap)))


def lower_bound(q, env: NodeEnvelope, cfg: SegmentConfig) -> float:
    return lower_bound_from_summary(summarize_series(q, cfg), env, cfg)


def lower_bounds_batch(
    qsumms: np.ndarray, min_rows: np.ndarray, max_rows: np.ndarray, cfg: SegmentConfig
) -> np.ndarray:
    """Lower bounds for every (query summary, envelope) pair; shape (q, nodes)."""
    qs = np.atleast_2d(qsumms)
    gap = np.maximum(min_rows[None, :, :] - qs[:, None, :], qs[:, None, :] - max_rows[None, :, :])
    np.maximum(gap, 0.0, out=gap)
    out = np.einsum("qns,qns,s->qn", gap, gap, cfg.widths.astype(np.float64))
    return np.sqrt(out, out=out)
