"""Per-filter auto-tuners: map a recall target to prediction-adjusting offsets.

Calibration gives each filter a descending list of absolute prediction
errors (non-conformity scores). Setting every filter's offset to its j-th
largest error and replaying all calibration searches yields one (mean
recall, offset) knot per filter and position; a monotone cubic through the
repaired knots is the quality-to-offset mapping. Replay never touches raw
series: visit order is a deterministic function of (index, query), so the
recorded skeletons reproduce the real search outcome for any offsets.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

RECALL_REL_TOL = 1e-6

logger = logging.getLogger(__name__)


def compute_alphas(predictions, targets) -> np.ndarray:
    """Absolute prediction errors, sorted descending."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError("predictions and targets must align")
    return np.sort(np.abs(targets - predictions))[::-1].copy()


class SteffenInterpolator:
    """Monotone piecewise cubic with Steffen-limited slopes.

    For monotone knots the interpolant is monotone; two knots degrade to the
    connecting line.
    """

    def __init__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 1 or x.shape != y.shape or x.shape[0] < 2:
            raise ValueError("need at least two aligned knots")
        if not (np.diff(x) > 0).all():
            raise ValueError("knot abscissae must be strictly increasing")
        self.x = x
        self.y = y
        h = np.diff(x)
        delta = np.diff(y) / h
        n = x.shape[0]
        m = np.empty(n)
        if n == 2:
            m[:] = delta[0]
        else:
            p = (delta[:-1] * h[1:] + delta[1:] * h[:-1]) / (h[:-1] + h[1:])
            m[1:-1] = np.where(
                np.sign(delta[:-1]) * np.sign(delta[1:]) <= 0,
                0.0,
                np.sign(p) * np.minimum(np.abs(p), 2 * np.minimum(np.abs(delta[:-1]), np.abs(delta[1:]))),
            )
            # one-sided boundary slopes, limited to twice the boundary secant
            p0 = delta[0] * (1 + h[0] / (h[0] + h[1])) - delta[1] * h[0] / (h[0] + h[1])
            m[0] = 0.0 if p0 * delta[0] <= 0 else np.sign(p0) * min(abs(p0), 2 * abs(delta[0]))
            pn = delta[-1] * (1 + h[-1] / (h[-1] + h[-2])) - delta[-2] * h[-1] / (h[-1] + h[-2])
            m[-1] = 0.0 if pn * delta[-1] <= 0 else np.sign(pn) * min(abs(pn), 2 * abs(delta[-1]))
        self.slopes = m

    def __call__(self, xq: float) -> float:
        x, y, m = self.x, self.y, self.slopes
        if xq <= x[0]:
            return float(y[0])
        if xq >= x[-1]:
            return float(y[-1])
        i = int(np.searchsorted(x, xq) - 1)
        h = x[i + 1] - x[i]
        t = (xq - x[i]) / h
        h00 = (1 + 2 * t) * (1 - t) ** 2
        h10 = t * (1 - t) ** 2
        h01 = t * t * (3 - 2 * t)
        h11 = t * t * (t - 1)
        return float(y[i] * h00 + h * m[i] * h10 + y[i + 1] * h01 + h * m[i + 1] * h11)


@dataclass
class QualityOffsetCurve:
    """Monotone mapping from a recall target to one filter's offset."""

    leaf_id: int
    alphas_desc: np.ndarray
    knot_quality: np.ndarray
    knot_offset: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        self._interp = (
            None
            if self.degenerate or self.knot_quality.shape[0] < 2
            else SteffenInterpolator(self.knot_quality, self.knot_offset)
        )

    @property
    def alpha_max(self) -> float:
        return float(self.alphas_desc[0]) if self.alphas_desc.shape[0] else 0.0

    def offset_for(self, quality: float) -> float:
        """Offset for a quality target; clamps keep out-of-range requests safe.

        Above the largest observed knot quality the offset saturates at the
        largest calibration error; below the smallest it drops to zero.
        """
        if not 0.0 <= quality <= 1.0:
            raise ValueError(f"quality target must be in [0, 1], got {quality}")
        if self.degenerate or self._interp is None:
            return self.alpha_max
        if quality > self.knot_quality[-1]:
            return self.alpha_max
        if quality < self.knot_quality[0]:
            return 0.0
        val = self._interp(quality)
        return min(max(val, 0.0), self.alpha_max)


@dataclass
class CalibrationSkeleton:
    """Replayable per-query visit skeletons for the calibration set.

    All matrices are (n_queries, n_leaves) in per-query visit order: column
    p holds the p-th visited leaf of each query. filter_slot holds the
    filter's index in the tuned-offset vector, or -1 for unfiltered leaves.
    """

    lb: np.ndarray
    dl: np.ndarray
    pred: np.ndarray
    filter_slot: np.ndarray
    nn_distance: np.ndarray

    @property
    def n_queries(self) -> int:
        return self.lb.shape[0]


def build_skeleton(
    lb_matrix: np.ndarray,
    dl_matrix: np.ndarray,
    visit_order: np.ndarray,
    nn_distance: np.ndarray,
    leaf_ids: np.ndarray,
    filter_leaf_ids,
    predictions: dict,
) -> CalibrationSkeleton:
    """Reorder leaf-major matrices into visit order and attach filter predictions."""
    n_q, n_leaves = lb_matrix.shape
    slot_of_leaf = {int(lid): s for s, lid in enumerate(filter_leaf_ids)}
    pred_cols = np.full((n_q, n_leaves), np.nan)
    slot_cols = np.full(n_leaves, -1, dtype=np.int32)
    for pos, lid in enumerate(leaf_ids):
        slot = slot_of_leaf.get(int(lid))
        if slot is not None:
            slot_cols[pos] = slot
            pred_cols[:, pos] = predictions[int(lid)]
    lb = np.take_along_axis(lb_matrix, visit_order, axis=1)
    dl = np.take_along_axis(dl_matrix, visit_order, axis=1)
    pred = np.take_along_axis(pred_cols, visit_order, axis=1)
    slot = slot_cols[visit_order]
    return CalibrationSkeleton(lb, dl, pred, slot, np.asarray(nn_distance, dtype=np.float64))


def simulate_search(skeleton: CalibrationSkeleton, offsets) -> np.ndarray:
    """Replay the filtered search for every query; returns achieved distances.

    Walks leaves in skeleton order keeping a best-so-far per query: a leaf is
    skipped when its lower bound exceeds bsf, or when it has a filter and
    prediction - offset exceeds bsf; otherwise bsf drops to its leaf-wise NN
    distance.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    max_slot = int(skeleton.filter_slot.max()) if skeleton.filter_slot.size else -1
    if max_slot >= offsets.shape[0] or (max_slot >= 0 and np.isnan(offsets[: max_slot + 1]).any()):
        raise ValueError("offsets must cover every filtered leaf (infinite disables, NaN invalid)")
    n_q, n_pos = skeleton.lb.shape
    bsf = np.full(n_q, math.inf)
    if offsets.shape[0]:
        off_matrix = np.where(skeleton.filter_slot >= 0, offsets[skeleton.filter_slot], 0.0)
    else:
        off_matrix = np.zeros_like(skeleton.lb)
    for pos in range(n_pos):
        lb = skeleton.lb[:, pos]
        alive = lb <= bsf
        if not alive.any():
            break
        pred = skeleton.pred[:, pos]
        filtered = alive & ~np.isnan(pred) & (pred - off_matrix[:, pos] > bsf)
        scan = alive & ~filtered
        np.minimum(bsf, np.where(scan, skeleton.dl[:, pos], math.inf), out=bsf)
    return bsf


def replay_recall(skeleton: CalibrationSkeleton, achieved: np.ndarray) -> float:
    """Mean recall-at-1: achieved distance matches the exact NN within tolerance."""
    return float(np.mean(achieved <= skeleton.nn_distance * (1.0 + RECALL_REL_TOL)))


def fit_auto_tuners(
    skeleton: CalibrationSkeleton, alphas_by_leaf: dict, min_calibration: int = 20
) -> dict:
    """Learn one quality-to-offset curve per filter from calibration replays.

    For each sorted error position j, every filter's offset becomes its j-th
    largest error; replaying all calibration queries gives the mean recall at
    that position. Duplicate recall values aggregate to their largest offset,
    an isotonic pass enforces a non-decreasing curve, and a Steffen cubic
    interpolates between knots.
    """
    c = skeleton.n_queries
    if c < min_calibration:
        raise ValueError(f"need at least {min_calibration} calibration queries, got {c}")
    leaf_order = sorted(alphas_by_leaf)
    for lid in leaf_order:
        if alphas_by_leaf[lid].shape[0] != c:
            raise ValueError(f"filter {lid} has {alphas_by_leaf[lid].shape[0]} alphas, expected {c}")
    if not leaf_order:
        return {}

    A = np.stack([alphas_by_leaf[lid] for lid in leaf_order])  # (filters, c) descending rows
    qualities = np.empty(c)
    for j in range(c):
        achieved = simulate_search(skeleton, A[:, j])
        qualities[j] = replay_recall(skeleton, achieved)

    curves = {}
    for row, lid in enumerate(leaf_order):
        curves[lid] = _fit_curve(lid, A[row], qualities)
    return curves


def _fit_curve(leaf_id: int, alphas_desc: np.ndarray, qualities: np.ndarray) -> QualityOffsetCurve:
    # aggregate duplicate qualities by their largest (most conservative) offset
    by_quality = {}
    for q, o in zip(qualities, alphas_desc):
        q = float(q)
        if q not in by_quality or o > by_quality[q]:
            by_quality[q] = float(o)
    qs = np.asarray(sorted(by_quality), dtype=np.float64)
    os_ = np.asarray([by_quality[q] for q in qs], dtype=np.float64)
    if qs.shape[0] < 2:
        logger.warning(
            "filter %d: fewer than 2 distinct calibration qualities; using a constant "
            "maximally-conservative offset curve",
            leaf_id,
        )
        return QualityOffsetCurve(
            leaf_id, alphas_desc, qs, os_, degenerate=True
        )
    os_ = np.maximum.accumulate(os_)  # isotonic upper envelope
    return QualityOffsetCurve(leaf_id, alphas_desc, qs, os_)


def tune(curves: dict, target: float) -> dict:
    """Per-filter offsets for a recall target, clamped to [0, largest error]."""
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"recall target must be in [0, 1], got {target}")
    return {lid: curve.offset_for(target) for lid, curve in curves.items()}
