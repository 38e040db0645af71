"""Summarization tree: construction, exact best-first k-NN search, persistence.

One traversal engine serves exact search, the (1+eps)-approximate variant,
and filtered search: callers choose a best-so-far scale factor and an
optional per-leaf predictor/offset map. Leaves pop from the frontier in
ascending (lower bound, node id) order, which makes visit order a
deterministic function of (index, query) alone.
"""

from __future__ import annotations

import heapq
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .series import Dataset, as_series, file_sha256, load_dataset, scan_distances
from .summarize import (
    NodeEnvelope,
    SegmentConfig,
    envelope_insert,
    lower_bound_from_summary,
    segment_config,
    summarize_matrix,
    summarize_series,
)

DEFAULT_MAX_LEAF_SIZE = 1000
INDEX_FORMAT_VERSION = 1


class TreeNode:
    __slots__ = (
        "node_id",
        "envelope",
        "split_segment",
        "split_threshold",
        "left",
        "right",
        "members",
        "size",
        "oversized",
    )

    def __init__(self, node_id: int, num_segments: int):
        self.node_id = node_id
        self.envelope = NodeEnvelope.empty(num_segments)
        self.split_segment = None
        self.split_threshold = None
        self.left = None
        self.right = None
        self.members = []  # series ids; None once the node becomes internal
        self.size = 0
        self.oversized = False

    @property
    def is_leaf(self) -> bool:
        return self.members is not None


@dataclass
class SearchStats:
    n: int
    leaves_visited: int = 0
    leaves_searched: int = 0
    leaves_lb_pruned: int = 0
    leaves_filter_pruned: int = 0
    filter_inferences: int = 0
    series_scanned: int = 0
    wall_time_s: float = 0.0


@dataclass(frozen=True)
class TraceEntry:
    leaf_id: int
    lower_bound: float
    searched: bool
    leaf_nn_distance: float | None
    bsf_before: float


@dataclass
class SearchOutcome:
    results: list  # [(id, distance)] ascending by (distance, id)
    stats: SearchStats
    trace: list | None = None


class Index:
    """Built tree over one dataset; immutable after construction."""

    def __init__(self, root: TreeNode, nodes: list, cfg: SegmentConfig, dataset: Dataset, max_leaf_size: int):
        self.root = root
        self.nodes = nodes
        self.cfg = cfg
        self.dataset = dataset
        self.max_leaf_size = max_leaf_size
        self.leaves = sorted((nd for nd in nodes if nd.is_leaf), key=lambda nd: nd.node_id)
        self.leaf_blocks = {}
        for leaf in self.leaves:
            ids = np.asarray(leaf.members, dtype=np.int64)
            self.leaf_blocks[leaf.node_id] = (np.ascontiguousarray(dataset.values[ids]), ids)

    @property
    def n(self) -> int:
        return self.dataset.n

    def leaf_sizes(self) -> list:
        return [(leaf.node_id, leaf.size) for leaf in self.leaves]

    def leaf_envelope_rows(self):
        """Stacked (mean_min, mean_max) matrices aligned with self.leaves order."""
        mins = np.stack([leaf.envelope.mean_min for leaf in self.leaves])
        maxs = np.stack([leaf.envelope.mean_max for leaf in self.leaves])
        return mins, maxs

    def has_oversized_leaves(self) -> bool:
        return any(leaf.oversized for leaf in self.leaves)


def _try_split(leaf: TreeNode, summs: np.ndarray, nodes: list) -> bool:
    """Split an overflowing leaf on the widest-envelope segment at the member median.

    Returns False (and marks the leaf oversized) when members cannot be
    separated on any segment.
    """
    width = leaf.envelope.width()
    seg = int(np.argmax(width))
    if not width[seg] > 0.0:
        leaf.oversized = True
        return False
    member_ids = np.asarray(leaf.members, dtype=np.int64)
    col = summs[member_ids, seg]
    threshold = float(np.median(col))
    left_mask = col <= threshold
    if left_mask.all() or not left_mask.any():
        threshold = float((col.min() + col.max()) / 2.0)
        left_mask = col <= threshold
        if left_mask.all() or not left_mask.any():
            leaf.oversized = True
            return False

    left = TreeNode(len(nodes), width.shape[0])
    nodes.append(left)
    right = TreeNode(len(nodes), width.shape[0])
    nodes.append(right)
    for child, mask in ((left, left_mask), (right, ~left_mask)):
        child.members = [int(i) for i in member_ids[mask]]
        child.size = len(child.members)
        child.envelope = NodeEnvelope.from_rows(summs[member_ids[mask]])

    leaf.members = None
    leaf.split_segment = seg
    leaf.split_threshold = threshold
    leaf.left = left
    leaf.right = right
    return True


def build_index(
    data: Dataset,
    max_leaf_size: int = DEFAULT_MAX_LEAF_SIZE,
    cfg: SegmentConfig | None = None,
) -> Index:
    """Insert series one by one in id order, splitting leaves on overflow."""
    if max_leaf_size < 2:
        raise ValueError(f"max_leaf_size must be >= 2, got {max_leaf_size}")
    if cfg is None:
        cfg = segment_config(data.m)
    summs = summarize_matrix(data.values, cfg)
    root = TreeNode(0, cfg.num_segments)
    nodes = [root]
    for sid in range(data.n):
        s = summs[sid]
        node = root
        while not node.is_leaf:
            node.size += 1
            envelope_insert(node.envelope, s)
            node = node.left if s[node.split_segment] <= node.split_threshold else node.right
        node.members.append(sid)
        node.size += 1
        envelope_insert(node.envelope, s)
        if node.size > max_leaf_size:
            _try_split(node, summs, nodes)
    return Index(root, nodes, cfg, data, max_leaf_size)


class _TopK:
    """Running k best (distance, id) pairs; ties rank by ascending id."""

    __slots__ = ("k", "dists", "ids")

    def __init__(self, k: int):
        self.k = k
        self.dists = np.empty(0, dtype=np.float64)
        self.ids = np.empty(0, dtype=np.int64)

    @property
    def bsf(self) -> float:
        return float(self.dists[-1]) if self.dists.shape[0] == self.k else math.inf

    def offer(self, dists: np.ndarray, ids: np.ndarray) -> None:
        mask = dists <= self.bsf
        if not mask.any():
            return
        d = np.concatenate((self.dists, dists[mask]))
        i = np.concatenate((self.ids, ids[mask]))
        order = np.lexsort((i, d))[: self.k]
        self.dists = d[order]
        self.ids = i[order]

    def results(self) -> list:
        return [(int(i), float(d)) for i, d in zip(self.ids, self.dists)]


def search_engine(
    index: Index,
    q,
    k: int = 1,
    *,
    bsf_factor: float = 1.0,
    predictors: dict | None = None,
    offsets: dict | None = None,
    want_trace: bool = False,
) -> SearchOutcome:
    """Best-first traversal with cascade pruning.

    A popped node is pruned when its lower bound exceeds bsf * bsf_factor
    (bsf_factor < 1 gives the (1+eps)-approximate mode). A surviving leaf
    with a predictor is additionally pruned when prediction - offset exceeds
    the scaled bsf. Heap order is (lower bound, node id), so equal bounds pop
    in ascending id order and parents always precede their children.
    """
    t0 = time.perf_counter()
    q = as_series(q)
    if q.shape[0] != index.dataset.m:
        raise ValueError(f"query length {q.shape[0]} does not match dataset length {index.dataset.m}")
    if not 1 <= k <= index.n:
        raise ValueError(f"k must be in [1, {index.n}], got {k}")
    predictors = predictors or {}
    offsets = offsets or {}
    missing = [lid for lid in predictors if lid not in offsets]
    if missing:
        raise ValueError(f"missing offsets for filtered leaves {missing}")

    qsumm = summarize_series(q, index.cfg)
    cfg = index.cfg
    top = _TopK(k)
    stats = SearchStats(n=index.n)
    trace = [] if want_trace else None

    heap = [(lower_bound_from_summary(qsumm, index.root.envelope, cfg), 0)]
    while heap:
        lb, nid = heapq.heappop(heap)
        node = index.nodes[nid]
        bsf = top.bsf
        if lb > bsf * bsf_factor:
            if node.is_leaf:
                stats.leaves_visited += 1
                stats.leaves_lb_pruned += 1
                if want_trace:
                    trace.append(TraceEntry(nid, lb, False, None, bsf))
            # heap pops in ascending lb order and bsf never increases, so
            # every remaining node is prunable too
            break
        if not node.is_leaf:
            for child in (node.left, node.right):
                heapq.heappush(
                    heap, (lower_bound_from_summary(qsumm, child.envelope, cfg), child.node_id)
                )
            continue

        stats.leaves_visited += 1
        predictor = predictors.get(nid)
        if predictor is not None:
            stats.filter_inferences += 1
            pred = float(predictor(q))
            if pred - offsets[nid] > bsf * bsf_factor:
                stats.leaves_filter_pruned += 1
                if want_trace:
                    trace.append(TraceEntry(nid, lb, False, None, bsf))
                continue

        block, ids = index.leaf_blocks[nid]
        dists = scan_distances(q, block)
        stats.leaves_searched += 1
        stats.series_scanned += ids.shape[0]
        if want_trace:
            trace.append(TraceEntry(nid, lb, True, float(dists.min()), bsf))
        top.offer(dists, ids)

    stats.wall_time_s = time.perf_counter() - t0
    return SearchOutcome(results=top.results(), stats=stats, trace=trace)


def exact_search(index: Index, q, k: int = 1, want_trace: bool = False) -> SearchOutcome:
    """The true k nearest neighbors, ties broken by smaller id."""
    return search_engine(index, q, k, want_trace=want_trace)


def pruning_ratio(stats: SearchStats) -> float:
    """Fraction of the collection whose distances were never computed."""
    return 1.0 - stats.series_scanned / stats.n


def linear_scan(data: Dataset, q, k: int = 1) -> list:
    """Brute-force oracle: top-k by (distance, id) over the whole collection."""
    q = as_series(q)
    dists = scan_distances(q, data.values)
    order = np.lexsort((np.arange(data.n), dists))[:k]
    return [(int(i), float(dists[i])) for i in order]


def save_index(index: Index, path, dataset_path) -> None:
    """Persist the tree as a flat node table plus the dataset location and hash."""
    nodes_out = []
    parents = {0: None}
    for nd in index.nodes:
        if not nd.is_leaf:
            parents[nd.left.node_id] = nd.node_id
            parents[nd.right.node_id] = nd.node_id
    for nd in index.nodes:
        entry = {
            "id": nd.node_id,
            "kind": "leaf" if nd.is_leaf else "internal",
            "parent": parents.get(nd.node_id),
            "split": None
            if nd.is_leaf
            else {"segment": nd.split_segment, "threshold": nd.split_threshold},
            "envelope": {
                "mean_min": nd.envelope.mean_min.tolist(),
                "mean_max": nd.envelope.mean_max.tolist(),
            },
            "members": list(nd.members) if nd.is_leaf else None,
        }
        if nd.oversized:
            entry["oversized"] = True
        nodes_out.append(entry)
    doc = {
        "version": INDEX_FORMAT_VERSION,
        "dataset_path": str(dataset_path),
        "dataset_sha256": file_sha256(dataset_path),
        "max_leaf_size": index.max_leaf_size,
        "num_segments": index.cfg.num_segments,
        "nodes": nodes_out,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_index(path, dataset: Dataset | None = None, dataset_path=None) -> Index:
    """Rebuild an Index from its JSON node table; verifies the dataset hash."""
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != INDEX_FORMAT_VERSION:
        raise ValueError(f"unsupported index version {doc.get('version')}")
    ds_path = Path(dataset_path) if dataset_path is not None else Path(doc["dataset_path"])
    if not ds_path.is_absolute() and not ds_path.exists():
        ds_path = path.parent / ds_path
    if dataset is None:
        if file_sha256(ds_path) != doc["dataset_sha256"]:
            raise ValueError(f"dataset hash mismatch for {ds_path}")
        dataset = load_dataset(ds_path)
    cfg = segment_config(dataset.m, doc["num_segments"])
    entries = sorted(doc["nodes"], key=lambda e: e["id"])
    nodes = [TreeNode(e["id"], cfg.num_segments) for e in entries]
    for e, nd in zip(entries, nodes):
        nd.envelope = NodeEnvelope(
            np.asarray(e["envelope"]["mean_min"], dtype=np.float64),
            np.asarray(e["envelope"]["mean_max"], dtype=np.float64),
        )
        nd.oversized = bool(e.get("oversized", False))
        if e["kind"] == "leaf":
            nd.members = [int(i) for i in e["members"]]
            nd.size = len(nd.members)
        else:
            nd.members = None
            nd.split_segment = int(e["split"]["segment"])
            nd.split_threshold = float(e["split"]["threshold"])
    child_map = {}
    for e in entries:
        if e["parent"] is not None:
            child_map.setdefault(e["parent"], []).append(e["id"])
    for pid, kids in child_map.items():
        kids = sorted(kids)
        if len(kids) != 2:
            raise ValueError(f"internal node {pid} does not have exactly two children")
        nodes[pid].left = nodes[kids[0]]
        nodes[pid].right = nodes[kids[1]]
    for nd in nodes:
        if not nd.is_leaf:
            nd.size = 0
    # recompute internal sizes bottom-up (children have larger ids)
    for nd in reversed(nodes):
        if not nd.is_leaf:
            nd.size = nd.left.size + nd.right.size
    return Index(nodes[0], nodes, cfg, dataset, int(doc["max_leaf_size"]))
