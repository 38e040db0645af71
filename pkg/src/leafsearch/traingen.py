"""Twofold training-query generation and two-pass target collection.

Global queries are noisy samples of the whole collection and provide, per
selected leaf, the leaf's nearest-neighbor distance as a regression target.
Local queries are noisy samples of one leaf's own members and populate the
low-distance target range that global queries rarely reach. A held-out tail
of the global pool becomes the calibration set, for which targets and visit
skeletons are collected against every leaf so searches can later be replayed
without touching raw series.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .series import QuerySet, batch_distances, quantize32, save_queries
from .summarize import lower_bounds_batch, summarize_matrix
from .tree import Index

DEFAULT_NOISE_RANGE = (0.1, 0.4)


@dataclass(frozen=True)
class SplitPlan:
    """Budget split between global and per-leaf local training queries."""

    n_global: int = 1500
    n_local: int = 500
    calibration: int = 300

    def __post_init__(self):
        if self.n_global < 1 or self.n_local < 0 or self.calibration < 1:
            raise ValueError("plan counts must be positive")
        if self.calibration >= self.n_global:
            raise ValueError("calibration must be smaller than the global pool")

    @property
    def total(self) -> int:
        return self.n_global + self.n_local

    @property
    def ratio(self) -> float:
        return self.n_global / self.n_local if self.n_local else float("inf")


@dataclass
class LocalQueries:
    leaf_id: int
    queries: np.ndarray
    levels: np.ndarray
    source_ids: np.ndarray
    targets: np.ndarray | None = None  # leaf-wise NN distance per query
    lbs: np.ndarray | None = None  # lower bound against the leaf's own envelope


@dataclass
class GlobalTrainSet:
    """Global queries with per-selected-leaf targets and full visit skeletons.

    leaf_ids fixes the column order (ascending leaf id) of lb_matrix and
    dl_calib_full; visit_order holds column positions sorted by (lower bound,
    leaf id) per query. The last `calibration_count` queries form the
    calibration set and have targets for every leaf, not just selected ones.
    """

    queries: np.ndarray
    selected_leaves: list
    dl_selected: np.ndarray  # (n_global, n_selected)
    nn_distance: np.ndarray
    leaf_ids: np.ndarray
    lb_matrix: np.ndarray  # (n_global, n_leaves)
    visit_order: np.ndarray  # (n_global, n_leaves) positions into leaf_ids
    calibration_count: int
    dl_calib_full: np.ndarray  # (calibration_count, n_leaves)

    @property
    def n_global(self) -> int:
        return self.queries.shape[0]

    @property
    def train_pool_size(self) -> int:
        return self.n_global - self.calibration_count

    def leaf_column(self, leaf_id: int) -> int:
        pos = int(np.searchsorted(self.leaf_ids, leaf_id))
        if pos >= self.leaf_ids.shape[0] or self.leaf_ids[pos] != leaf_id:
            raise KeyError(f"unknown leaf id {leaf_id}")
        return pos

    def selected_column(self, leaf_id: int) -> int:
        try:
            return self.selected_leaves.index(leaf_id)
        except ValueError:
            raise KeyError(f"leaf {leaf_id} was not selected") from None


def _noisy_samples(sources: np.ndarray, noise_range, rng) -> tuple:
    lo, hi = float(noise_range[0]), float(noise_range[1])
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"noise range must satisfy 0 <= lo <= hi <= 1, got {noise_range}")
    n, m = sources.shape
    levels = rng.uniform(lo, hi, size=n)
    noise = rng.standard_normal((n, m)) * levels[:, None]
    return quantize32(sources + noise), levels


def generate_global_queries(data, n: int, noise_range=DEFAULT_NOISE_RANGE, seed: int = 0):
    """Uniform samples of the collection with per-query uniform noise levels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, data.n, size=n)
    queries, levels = _noisy_samples(data.values[idx], noise_range, rng)
    return queries, levels


def generate_local_queries(
    index: Index, leaf_id: int, n: int, noise_range=DEFAULT_NOISE_RANGE, seed: int = 0
) -> LocalQueries:
    """Noisy samples (with replacement) of one leaf's member series."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if leaf_id not in index.leaf_blocks:
        raise ValueError(f"unknown leaf id {leaf_id}")
    block, ids = index.leaf_blocks[leaf_id]
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, ids.shape[0], size=n)
    queries, levels = _noisy_samples(block[pick], noise_range, rng)
    return LocalQueries(leaf_id, queries, levels, ids[pick])


def collect_local_targets(index: Index, local: LocalQueries) -> LocalQueries:
    """Leaf-wise NN distances of local queries, scanning only their own leaf."""
    block, _ = index.leaf_blocks[local.leaf_id]
    local.targets = batch_distances(local.queries, block).min(axis=1)
    env = index.nodes[local.leaf_id].envelope
    qsumms = summarize_matrix(local.queries, index.cfg)
    local.lbs = lower_bounds_batch(
        qsumms, env.mean_min[None, :], env.mean_max[None, :], index.cfg
    )[:, 0]
    return local


def collect_targets(
    index: Index, selected_leaves, queries: np.ndarray, calibration_count: int
) -> GlobalTrainSet:
    """Two-pass target collection for the global query pool.

    Pass 1 scans each selected leaf once against all queries (and every leaf
    against the calibration tail). Pass 2 walks each query's leaves in lower
    bound order, reusing pass-1 distances for selected leaves, to obtain the
    true NN distance without rescanning.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n_q = queries.shape[0]
    if not 1 <= calibration_count < n_q:
        raise ValueError("calibration_count must be in [1, n_queries)")
    selected = sorted(int(l) for l in selected_leaves)
    leaf_ids = np.asarray([leaf.node_id for leaf in index.leaves], dtype=np.int64)
    unknown = set(selected) - set(int(i) for i in leaf_ids)
    if unknown:
        raise ValueError(f"unknown leaf ids in selection: {sorted(unknown)}")

    qsumms = summarize_matrix(queries, index.cfg)
    mins, maxs = index.leaf_envelope_rows()
    lb_matrix = lower_bounds_batch(qsumms, mins, maxs, index.cfg)
    # stable sort ties resolve to the lower column position = smaller leaf id
    visit_order = np.argsort(lb_matrix, axis=1, kind="stable").astype(np.int32)

    pos_of_leaf = {int(lid): pos for pos, lid in enumerate(leaf_ids)}
    dl_selected = np.empty((n_q, len(selected)), dtype=np.float64)
    for col, lid in enumerate(selected):
        block, _ = index.leaf_blocks[lid]
        dl_selected[:, col] = batch_distances(queries, block).min(axis=1)

    calib_start = n_q - calibration_count
    dl_calib_full = np.empty((calibration_count, leaf_ids.shape[0]), dtype=np.float64)
    selected_set = set(selected)
    for pos, lid in enumerate(leaf_ids):
        lid = int(lid)
        if lid in selected_set:
            dl_calib_full[:, pos] = dl_selected[calib_start:, selected.index(lid)]
        else:
            block, _ = index.leaf_blocks[lid]
            dl_calib_full[:, pos] = batch_distances(queries[calib_start:], block).min(axis=1)

    nn_distance = np.empty(n_q, dtype=np.float64)
    nn_distance[calib_start:] = dl_calib_full.min(axis=1)
    selected_pos = {pos_of_leaf[lid]: col for col, lid in enumerate(selected)}
    for qi in range(calib_start):
        bsf = float(dl_selected[qi].min()) if selected else float("inf")
        row_lb = lb_matrix[qi]
        for pos in visit_order[qi]:
            pos = int(pos)
            if row_lb[pos] >= bsf:
                break
            col = selected_pos.get(pos)
            if col is not None:
                d = float(dl_selected[qi, col])
            else:
                block, _ = index.leaf_blocks[int(leaf_ids[pos])]
                d = float(batch_distances(queries[qi : qi + 1], block).min())
            if d < bsf:
                bsf = d
        nn_distance[qi] = bsf

    return GlobalTrainSet(
        queries=queries,
        selected_leaves=selected,
        dl_selected=dl_selected,
        nn_distance=nn_distance,
        leaf_ids=leaf_ids,
        lb_matrix=lb_matrix,
        visit_order=visit_order,
        calibration_count=calibration_count,
        dl_calib_full=dl_calib_full,
    )


@dataclass
class FilterTrainingData:
    leaf_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    calib_x: np.ndarray
    calib_y: np.ndarray


def assemble_filter_training(
    leaf_id: int,
    global_set: GlobalTrainSet,
    local_set: LocalQueries,
    plan: SplitPlan,
    seed: int = 0,
) -> FilterTrainingData:
    """Combine global-pool and local queries for one leaf, split 4:1 train/val.

    The calibration tail of the global pool is excluded from training inputs
    and returned separately; it is identical across filters.
    """
    if local_set.targets is None:
        raise ValueError("local targets not collected")
    if global_set.calibration_count < 1:
        raise ValueError("plan yields an empty calibration set")
    col = global_set.selected_column(leaf_id)
    pool = global_set.train_pool_size
    X = np.concatenate((global_set.queries[:pool], local_set.queries))
    y = np.concatenate((global_set.dl_selected[:pool, col], local_set.targets))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(X.shape[0])
    n_train = (X.shape[0] * 4) // 5
    tr, va = perm[:n_train], perm[n_train:]
    return FilterTrainingData(
        leaf_id=leaf_id,
        train_x=X[tr],
        train_y=y[tr],
        val_x=X[va],
        val_y=y[va],
        calib_x=global_set.queries[pool:],
        calib_y=global_set.dl_selected[pool:, col],
    )


def write_training_artifacts(out_dir, global_set: GlobalTrainSet, locals_map: dict) -> list:
    """Persist queries (binary format), targets, and traces; returns written paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    qpath = out_dir / "global_queries.bin"
    save_queries(QuerySet(global_set.queries), qpath)
    written.append(qpath)

    calib_start = global_set.train_pool_size
    tpath = out_dir / "global_targets.jsonl"
    with open(tpath, "w") as fh:
        for qi in range(global_set.n_global):
            if qi < calib_start:
                cols = (
                    (global_set.leaf_column(lid), global_set.dl_selected[qi, c])
                    for c, lid in enumerate(global_set.selected_leaves)
                )
            else:
                cols = (
                    (pos, global_set.dl_calib_full[qi - calib_start, pos])
                    for pos in range(global_set.leaf_ids.shape[0])
                )
            for pos, d_l in cols:
                fh.write(
                    json.dumps(
                        {
                            "query_idx": qi,
                            "leaf_id": int(global_set.leaf_ids[pos]),
                            "d_lb": float(global_set.lb_matrix[qi, pos]),
                            "d_L": float(d_l),
                        }
                    )
                    + "\n"
                )
    written.append(tpath)

    trpath = out_dir / "global_traces.jsonl"
    with open(trpath, "w") as fh:
        for qi in range(global_set.n_global):
            fh.write(
                json.dumps(
                    {
                        "query_idx": qi,
                        "nn_distance": float(global_set.nn_distance[qi]),
                        "visit_order": [int(global_set.leaf_ids[p]) for p in global_set.visit_order[qi]],
                    }
                )
                + "\n"
            )
    written.append(trpath)

    for leaf_id, local in sorted(locals_map.items()):
        lq = out_dir / f"local_{leaf_id}.bin"
        save_queries(QuerySet(local.queries), lq)
        written.append(lq)
        lt = out_dir / f"local_{leaf_id}_targets.jsonl"
        with open(lt, "w") as fh:
            for qi, d_l in enumerate(local.targets):
                fh.write(
                    json.dumps(
                        {
                            "query_idx": qi,
                            "leaf_id": leaf_id,
                            "d_lb": float(local.lbs[qi]) if local.lbs is not None else None,
                            "d_L": float(d_l),
                        }
                    )
                    + "\n"
                )
        written.append(lt)
    return written
