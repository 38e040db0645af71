"""Leaf selection: runtime-constant measurement, size threshold, greedy pick,
benefit model, and an exact 0/1 knapsack solver."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .mlp import MlpModel, weight_byte_size
from .series import scan_distances

# Fixed per-filter storage overhead beyond the raw parameter payload
# (weights file header plus bookkeeping).
FILTER_OVERHEAD_BYTES = 64

KNAPSACK_WEIGHT_UNIT = 1024  # bytes per DP weight unit
DEFAULT_MAX_DP_CELLS = 20_000_000


class MeasurementError(RuntimeError):
    """Timer resolution too coarse to measure a runtime constant."""


class KnapsackSizeError(RuntimeError):
    """DP table would exceed the configured cell limit; fall back to greedy."""


@dataclass(frozen=True)
class RuntimeConstants:
    t_series: float  # seconds per single-series distance computation
    t_filter: float  # seconds per filter inference
    filter_bytes: int  # memory bytes per filter

    def __post_init__(self):
        if not (self.t_series > 0 and self.t_filter > 0 and self.filter_bytes > 0):
            raise ValueError("runtime constants must be strictly positive")


@dataclass(frozen=True)
class SelectionBudget:
    capacity_bytes: int
    a: float = 2.0  # inverse of the assumed filter pruning probability

    def __post_init__(self):
        if self.capacity_bytes < 0:
            raise ValueError("capacity must be >= 0")
        if self.a < 1:
            raise ValueError("a must be >= 1")


def filter_memory_bytes(m: int) -> int:
    return weight_byte_size(m) + FILTER_OVERHEAD_BYTES


def measure_constants(index, sample_queries, trial_model: MlpModel, trials: int = 100) -> RuntimeConstants:
    """Median wall-clock costs of one leaf-series distance and one filter inference."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    queries = np.atleast_2d(np.asarray(sample_queries, dtype=np.float64))
    leaf = max(index.leaves, key=lambda nd: nd.size)
    block, _ = index.leaf_blocks[leaf.node_id]
    scan_distances(queries[0], block)  # warm up
    per_series = []
    for t in range(trials):
        q = queries[t % queries.shape[0]]
        t0 = time.perf_counter()
        scan_distances(q, block)
        per_series.append((time.perf_counter() - t0) / block.shape[0])
    t_series = float(np.median(per_series))
    if t_series == 0.0:
        # repeat scans inside the timed region to beat the timer resolution
        per_series = []
        for t in range(trials):
            q = queries[t % queries.shape[0]]
            t0 = time.perf_counter()
            for _ in range(16):
                scan_distances(q, block)
            per_series.append((time.perf_counter() - t0) / (16 * block.shape[0]))
        t_series = float(np.median(per_series))
        if t_series == 0.0:
            raise MeasurementError("distance timing is zero even with batched trials")

    trial_model.forward(queries[0][: trial_model.input_dim])  # warm up
    per_inference = []
    for t in range(trials):
        q = queries[t % queries.shape[0]][: trial_model.input_dim]
        t0 = time.perf_counter()
        trial_model.forward(q)
        per_inference.append(time.perf_counter() - t0)
    t_filter = float(np.median(per_inference))
    if t_filter == 0.0:
        raise MeasurementError("inference timing is zero")

    return RuntimeConstants(t_series, t_filter, filter_memory_bytes(trial_model.input_dim))


def compute_threshold(constants: RuntimeConstants, a: float) -> int:
    """Minimum leaf size for which a filter is expected to pay off."""
    return math.ceil(a * constants.t_filter / constants.t_series)


def estimate_benefit(size: int, p_lb: float, p_filter: float, constants: RuntimeConstants) -> float:
    """Expected seconds saved by filtering one leaf; may be negative."""
    for p in (p_lb, p_filter):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} outside [0, 1]")
    return (1.0 - p_lb) * (p_filter * constants.t_series * size - constants.t_filter)


def select_greedy(leaves, threshold: int, budget: SelectionBudget, filter_bytes: int) -> list:
    """Largest leaves first, while size >= threshold and the byte budget holds.

    Ties in size break by ascending leaf id; the result is invariant under
    permutation of the input list.
    """
    if filter_bytes <= 0:
        raise ValueError("filter_bytes must be positive")
    ordered = sorted(leaves, key=lambda item: (-item[1], item[0]))
    selected = []
    used = 0
    for leaf_id, size in ordered:
        if size < threshold:
            break
        if used + filter_bytes > budget.capacity_bytes:
            break
        selected.append(leaf_id)
        used += filter_bytes
    return selected


def solve_knapsack(values, weights, capacity: int, max_cells: int = DEFAULT_MAX_DP_CELLS) -> list:
    """Exact 0/1 knapsack: maximize total value under the weight capacity.

    Weights must be positive integers (callers quantize bytes beforehand);
    items with non-positive value are never selected. On ties the earlier
    item in input order wins, which keeps the result deterministic.
    """
    values = [float(v) for v in values]
    weights = [int(w) for w in weights]
    if len(values) != len(weights):
        raise ValueError("values and weights must align")
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be positive integers")
    capacity = int(capacity)
    if capacity < 0:
        raise ValueError("capacity must be >= 0")

    candidates = [i for i, v in enumerate(values) if v > 0 and weights[i] <= capacity]
    if not candidates:
        return []
    cells = (len(candidates) + 1) * (capacity + 1)
    if cells > max_cells:
        raise KnapsackSizeError(f"DP table of {cells} cells exceeds limit {max_cells}")

    table = np.zeros((len(candidates) + 1, capacity + 1), dtype=np.float64)
    for row, idx in enumerate(candidates, start=1):
        w, v = weights[idx], values[idx]
        table[row] = table[row - 1]
        take = table[row - 1, : capacity + 1 - w] + v
        np.maximum(table[row, w:], take, out=table[row, w:])

    selected = []
    w = capacity
    for row in range(len(candidates), 0, -1):
        if table[row, w] != table[row - 1, w]:
            idx = candidates[row - 1]
            selected.append(idx)
            w -= weights[idx]
    selected.reverse()
    return selected


def quantize_weight_bytes(num_bytes: int, unit: int = KNAPSACK_WEIGHT_UNIT) -> int:
    """Round a filter's byte weight up to DP units (conservative)."""
    return max(1, math.ceil(num_bytes / unit))


def quantize_capacity_bytes(num_bytes: int, unit: int = KNAPSACK_WEIGHT_UNIT) -> int:
    """Round the capacity down to DP units (conservative)."""
    return num_bytes // unit


def selection_report(
    constants: RuntimeConstants, budget: SelectionBudget, threshold: int, selected, sizes: dict
) -> dict:
    return {
        "t_S": constants.t_series,
        "t_F": constants.t_filter,
        "w": constants.filter_bytes,
        "a": budget.a,
        "th": threshold,
        "capacity": budget.capacity_bytes,
        "selected": [{"leaf_id": lid, "size": sizes[lid]} for lid in selected],
    }
