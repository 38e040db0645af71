"""Acceptance suite: every criterion at its stated tolerance.

Reference configuration: random-walk collection with n = 200,000 and m = 128,
max_leaf_size = 1000, 8 segments, training plan 1500 global / 500 local per
leaf / 300 calibration, and 200 held-out test queries per noise level in
{0.1, 0.2, 0.3, 0.4}. One [PASS]/[FAIL] line prints per criterion (visible
with pytest -s; captured output is shown on failure otherwise).

The fixtures here are expensive (tens of minutes in total); the suite is
meant to run as a whole: pytest tests/test_acceptance.py -v -s
"""

import time

import numpy as np
import pytest

from leafsearch.cli import recall_at_1, run_bench
from leafsearch.enhanced import SearchRequest, enhance, load_enhanced, search
from leafsearch.mlp import gradient_check, init_model
from leafsearch.select import (
    RuntimeConstants,
    SelectionBudget,
    compute_threshold,
    estimate_benefit,
    select_greedy,
    solve_knapsack,
)
from leafsearch.series import batch_distances, generate_randwalk, make_queries
from leafsearch.summarize import lower_bound_from_summary, summarize_series
from leafsearch.tree import build_index, exact_search, pruning_ratio, search_engine
from leafsearch.traingen import SplitPlan

N_REF = 200_000
M_REF = 128
MAX_LEAF = 1000
SEGMENTS = 8
PLAN = SplitPlan(n_global=1500, n_local=500, calibration=300)
NOISE_LEVELS = (0.1, 0.2, 0.3, 0.4)
QUERIES_PER_LEVEL = 200
MASTER_SEED = 1234


def _report(num, description, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {description} {detail}", flush=True)
    assert ok, f"criterion {num}: {description} {detail}"


@pytest.fixture(scope="module")
def ref(tmp_path_factory):
    """Reference dataset, index, enhancement, and test query pools."""
    t0 = time.perf_counter()
    data = generate_randwalk(N_REF, M_REF, seed=MASTER_SEED)
    index = build_index(data, max_leaf_size=MAX_LEAF)
    build_s = time.perf_counter() - t0

    out_dir = tmp_path_factory.mktemp("ref_enhanced")
    t0 = time.perf_counter()
    eidx = enhance(
        index,
        PLAN,
        SelectionBudget(capacity_bytes=64 * 1024 * 1024, a=2.0),
        seed=MASTER_SEED,
        out_dir=out_dir,
        workers=2,
    )
    enhance_s = time.perf_counter() - t0

    queries = {
        noise: make_queries(data, QUERIES_PER_LEVEL, noise, seed=MASTER_SEED + int(noise * 10)).values
        for noise in NOISE_LEVELS
    }
    return {
        "data": data,
        "index": index,
        "eidx": eidx,
        "dir": out_dir,
        "queries": queries,
        "build_s": build_s,
        "enhance_s": enhance_s,
    }


@pytest.fixture(scope="module")
def bench(ref):
    """Exact and filtered@0.99 metrics per noise level, via the bench harness."""
    t0 = time.perf_counter()
    sets = [(noise, ref["queries"][noise]) for noise in NOISE_LEVELS]
    report = run_bench(
        ref["index"], ref["eidx"], sets, targets=[0.99], methods=["exact", "filtered"],
        dataset_name="randwalk-200k", seed=MASTER_SEED,
    )
    bench_s = time.perf_counter() - t0
    rows = {}
    for row in report["rows"]:
        rows[(row["noise"], row["method"])] = row
    return {"rows": rows, "bench_s": bench_s, "report": report}


def _oracle_topk(data, queries, k, row_chunk=50_000):
    """Linear-scan oracle: top-k by (distance, id), row-chunked direct form."""
    ids = np.empty((queries.shape[0], k), dtype=np.int64)
    dists = np.empty((queries.shape[0], k))
    all_d = np.empty(data.n)
    for qi in range(queries.shape[0]):
        q = queries[qi]
        for start in range(0, data.n, row_chunk):
            diff = data.values[start : start + row_chunk] - q
            d2 = np.einsum("ij,ij->i", diff, diff)
            all_d[start : start + row_chunk] = d2
        np.sqrt(all_d, out=all_d)
        order = np.lexsort((np.arange(data.n), all_d))[:k]
        ids[qi] = order
        dists[qi] = all_d[order]
    return ids, dists


def test_criterion_1_exactness_oracle(ref):
    """exact_search matches linear scan on 400 queries in under 2 minutes."""
    t0 = time.perf_counter()
    queries = np.concatenate([ref["queries"][n][:100] for n in NOISE_LEVELS])
    oracle_ids, oracle_dists = _oracle_topk(ref["data"], queries, k=10)
    mismatches = 0
    for qi in range(queries.shape[0]):
        out = exact_search(ref["index"], queries[qi], k=10)
        got_ids = [i for i, _ in out.results]
        got_dists = np.array([d for _, d in out.results])
        if got_ids != oracle_ids[qi].tolist():
            mismatches += 1
        elif not np.allclose(got_dists, oracle_dists[qi], rtol=1e-6):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    _report(
        1,
        "exact search matches linear scan on 400 queries",
        mismatches == 0 and elapsed < 120,
        f"(mismatches={mismatches}, runtime={elapsed:.1f}s)",
    )


def test_criterion_2_lower_bound_soundness():
    """No lower-bound violation over every (leaf, query) pair on a 5k index."""
    t0 = time.perf_counter()
    data = generate_randwalk(5000, M_REF, seed=MASTER_SEED + 50)
    index = build_index(data, max_leaf_size=MAX_LEAF)
    queries = make_queries(data, 100, 0.3, seed=MASTER_SEED + 51).values
    violations = 0
    for q in queries:
        qsumm = summarize_series(q, index.cfg)
        for leaf in index.leaves:
            lb = lower_bound_from_summary(qsumm, leaf.envelope, index.cfg)
            closest = float(batch_distances(q, index.leaf_blocks[leaf.node_id][0]).min())
            if lb > closest * (1 + 1e-12) + 1e-12:
                violations += 1
    elapsed = time.perf_counter() - t0
    _report(
        2,
        "lower bound never exceeds the closest member distance (exhaustive 5k x 100)",
        violations == 0 and elapsed < 60,
        f"(violations={violations}, pairs={100 * len(index.leaves)}, runtime={elapsed:.1f}s)",
    )


def test_criterion_3_exact_mode_equivalence(ref):
    """Filtered search with filters disabled is outcome-identical to exact search."""
    eidx = ref["eidx"]
    mismatches = 0
    for noise in NOISE_LEVELS:
        for q in ref["queries"][noise][:100]:
            a = search(eidx, SearchRequest(query=q, k=1, exact=True))
            b = exact_search(ref["index"], q, k=1)
            if a.results != b.results or a.stats.series_scanned != b.stats.series_scanned:
                mismatches += 1
    _report(3, "exact-mode equals exact search on 400 queries", mismatches == 0,
            f"(mismatches={mismatches})")


def test_criterion_4_conformal_coverage_at_max_offset(ref):
    """Offsets at each filter's largest calibration error give recall 1.0 on all
    300 calibration queries (exact property)."""
    eidx = ref["eidx"]
    from leafsearch.enhanced import derive_seed
    from leafsearch.traingen import generate_global_queries

    gqueries, _ = generate_global_queries(
        ref["data"], PLAN.n_global, (0.1, 0.4), derive_seed(MASTER_SEED, 2)
    )
    calib = gqueries[PLAN.n_global - PLAN.calibration :]
    predictors = {lid: model.forward for lid, model in eidx.filters.items()}
    offsets = {lid: curve.alpha_max for lid, curve in eidx.curves.items()}
    hits = 0
    for q in calib:
        exact = exact_search(ref["index"], q, 1).results[0]
        out = search_engine(ref["index"], q, 1, predictors=predictors, offsets=offsets)
        hits += recall_at_1(out, exact[0], exact[1])
    _report(
        4,
        "max-offset filters reach recall 1.0 on all calibration queries",
        hits == PLAN.calibration,
        f"({int(hits)}/{PLAN.calibration})",
    )


def test_criterion_5_gradient_check():
    """Analytic vs central finite-difference gradients on 20 small models."""
    rng = np.random.default_rng(MASTER_SEED + 60)
    worst = 0.0
    for trial in range(20):
        m = int(rng.integers(2, 17))
        model = init_model(m, seed=int(rng.integers(0, 2**31)))
        while True:
            x = rng.standard_normal(m)
            if np.abs(model.astype(np.float64).preactivations(x)).min() > 1e-6:
                break
        y = float(rng.uniform(0, 5))
        worst = max(worst, gradient_check(model, x, y))
    _report(5, "backprop gradients match finite differences", worst < 1e-4,
            f"(max rel err={worst:.2e})")


def test_criterion_6_knapsack_oracle():
    """Exact DP matches exhaustive enumeration on 50 random instances."""
    rng = np.random.default_rng(MASTER_SEED + 70)
    failures = 0
    for _ in range(50):
        n = int(rng.integers(1, 16))
        values = [float(v) for v in rng.uniform(-3, 10, n)]
        weights = [int(w) for w in rng.integers(1, 10, n)]
        capacity = int(rng.integers(0, 35))
        got = solve_knapsack(values, weights, capacity)
        best = 0.0
        for mask in range(1 << n):
            sel = [i for i in range(n) if mask >> i & 1]
            if sum(weights[i] for i in sel) <= capacity:
                best = max(best, sum(values[i] for i in sel))
        value = sum(values[i] for i in got)
        feasible = sum(weights[i] for i in got) <= capacity
        if not feasible or abs(value - best) > 1e-9:
            failures += 1
    _report(6, "knapsack DP matches brute force on 50 instances", failures == 0,
            f"(failures={failures})")


def test_criterion_7_greedy_contract():
    """Greedy equals reference sort-and-scan; knapsack agrees under uniform weights."""
    rng = np.random.default_rng(MASTER_SEED + 80)
    constants = RuntimeConstants(t_series=2.3e-7, t_filter=6.1e-6, filter_bytes=1)
    failures = 0
    for _ in range(50):
        a = 2.0
        th = compute_threshold(constants, a)
        sizes = rng.integers(1, 200, size=14)
        if (sizes == th).any():  # agreement is stated for strict exceedance
            sizes = sizes + 1
        leaves = [(int(i), int(s)) for i, s in enumerate(sizes)]
        capacity = int(rng.integers(0, 16))
        budget = SelectionBudget(capacity_bytes=capacity, a=a)
        greedy = select_greedy(leaves, th, budget, 1)
        reference = []
        used = 0
        for lid, size in sorted(leaves, key=lambda t: (-t[1], t[0])):
            if size >= th and used + 1 <= capacity:
                reference.append(lid)
                used += 1
        if greedy != reference or any(dict(leaves)[l] < th for l in greedy):
            failures += 1
            continue
        values = [estimate_benefit(s, 0.35, 1.0 / a, constants) for _, s in leaves]
        if sorted(solve_knapsack(values, [1] * len(leaves), capacity)) != sorted(greedy):
            failures += 1
    _report(7, "greedy selection contract and knapsack agreement", failures == 0,
            f"(failures={failures})")


def test_criterion_8_target_monotonicity(ref):
    """Achieved distance non-increasing and mean recall non-decreasing in target."""
    eidx = ref["eidx"]
    queries = ref["queries"][0.2]
    targets = (0.90, 0.95, 0.99)
    distance_violations = 0
    recalls = []
    for target in targets:
        hits = 0.0
        for qi, q in enumerate(queries):
            outs = search(eidx, SearchRequest(query=q, k=1, target=target))
            exact = exact_search(ref["index"], q, 1).results[0]
            hits += recall_at_1(outs, exact[0], exact[1])
        recalls.append(hits / len(queries))
    per_query = {t: [] for t in targets}
    for q in queries:
        for t in targets:
            per_query[t].append(search(eidx, SearchRequest(query=q, k=1, target=t)).results[0][1])
    for lo, hi in zip(targets, targets[1:]):
        for dlo, dhi in zip(per_query[lo], per_query[hi]):
            if dhi > dlo:
                distance_violations += 1
    recall_ok = all(a <= b + 1e-12 for a, b in zip(recalls, recalls[1:]))
    _report(
        8,
        "achieved distance and recall are monotone in the target",
        distance_violations == 0 and recall_ok,
        f"(distance violations={distance_violations}, recalls={[round(r, 4) for r in recalls]})",
    )


def test_criterion_9_recall_target_attainment(bench):
    """Mean recall-at-1 >= 0.97 at target 0.99 on every noise level."""
    recalls = {n: bench["rows"][(n, "filtered")]["mean_recall"] for n in NOISE_LEVELS}
    ok = all(r >= 0.97 for r in recalls.values())
    _report(9, "recall >= 0.97 at target 0.99 on each noise level", ok,
            f"({ {n: round(r, 4) for n, r in recalls.items()} })")


@pytest.fixture(scope="module")
def oracle_runs(ref):
    """Per-level searches with perfect filters: true leaf distances, zero offsets."""
    index = ref["index"]
    leaf_ids = [leaf.node_id for leaf in index.leaves]
    per_level = {}
    for noise in NOISE_LEVELS:
        queries = ref["queries"][noise]
        dl_cols = {
            lid: batch_distances(queries, index.leaf_blocks[lid][0]).min(axis=1)
            for lid in leaf_ids
        }
        hits, ratios = 0.0, []
        for qi, q in enumerate(queries):
            predictors = {lid: (lambda _q, v=float(dl_cols[lid][qi]): v) for lid in leaf_ids}
            offsets = dict.fromkeys(leaf_ids, 0.0)
            out = search_engine(index, q, 1, predictors=predictors, offsets=offsets)
            exact = exact_search(index, q, 1).results[0]
            hits += recall_at_1(out, exact[0], exact[1])
            ratios.append(pruning_ratio(out.stats))
        per_level[noise] = {"recall": hits / len(queries), "pruning": float(np.mean(ratios))}
    return per_level


def test_criterion_10_pruning_improvement(ref, bench, oracle_runs):
    """Filtered pruning beats exact by >= 10pp on >= 3 levels, never lags by > 1pp;
    end-to-end enhance + bench stays under 60 minutes.

    Known shortfall at this scale: the summarization baseline already prunes
    about 0.97 / 0.91 of the collection at noise 0.1 / 0.2, and the oracle
    replay (perfect filters, zero offsets) caps the achievable gain near
    2.8pp / 8.5pp there -- under the 10-point bar on two of the four levels,
    so no filter can reach 3 of 4. The threshold is kept as stated rather
    than loosened; the printed ceilings make the FAIL self-explanatory.
    """
    deltas, ceilings = {}, {}
    for noise in NOISE_LEVELS:
        f = bench["rows"][(noise, "filtered")]["mean_pruning_ratio"]
        e = bench["rows"][(noise, "exact")]["mean_pruning_ratio"]
        deltas[noise] = f - e
        ceilings[noise] = oracle_runs[noise]["pruning"] - e
    improved = sum(1 for d in deltas.values() if d >= 0.10)
    never_worse = all(d >= -0.01 for d in deltas.values())
    runtime = ref["enhance_s"] + bench["bench_s"]
    ok = improved >= 3 and never_worse and runtime < 3600
    _report(
        10,
        "pruning gains >= 10pp on >= 3 noise levels within the time budget",
        ok,
        f"(deltas={ {n: round(d, 3) for n, d in deltas.items()} }, "
        f"oracle ceilings={ {n: round(c, 3) for n, c in ceilings.items()} }, "
        f"enhance={ref['enhance_s']:.0f}s bench={bench['bench_s']:.0f}s)",
    )


def test_criterion_11_oracle_filter_ceiling(bench, oracle_runs):
    """True-distance filters with zero offsets: recall 1.0 and strictly more
    pruning than the learned filters."""
    oracle_recall = float(np.mean([oracle_runs[n]["recall"] for n in NOISE_LEVELS]))
    oracle_pruning = float(np.mean([oracle_runs[n]["pruning"] for n in NOISE_LEVELS]))
    learned_pruning = float(
        np.mean([bench["rows"][(n, "filtered")]["mean_pruning_ratio"] for n in NOISE_LEVELS])
    )
    ok = oracle_recall == 1.0 and oracle_pruning > learned_pruning
    _report(
        11,
        "oracle filters give recall 1.0 and beat learned pruning",
        ok,
        f"(recall={oracle_recall:.4f}, oracle={oracle_pruning:.3f} > learned={learned_pruning:.3f})",
    )


def test_criterion_12_epsilon_search_correctness(ref):
    """Approximate answers stay within (1 + eps) of the exact distance."""
    from leafsearch.cli import epsilon_search

    violations = 0
    checked = 0
    for noise in NOISE_LEVELS:
        for q in ref["queries"][noise][:50]:
            exact = exact_search(ref["index"], q, 1).results[0][1]
            for eps in (0.0, 1.0, 3.0):
                got = epsilon_search(ref["index"], q, 1, eps).results[0][1]
                checked += 1
                if got > (1 + eps) * exact * (1 + 1e-12):
                    violations += 1
    _report(12, "epsilon search is (1+eps)-correct for eps in {0, 1, 3}",
            violations == 0, f"(violations={violations}/{checked})")


def test_criterion_13_persistence(ref, tmp_path):
    """Save/load reproduces identical outcomes; corrupted artifacts are rejected."""
    import dataclasses

    from leafsearch.series import load_dataset
    from leafsearch.tree import load_index, save_index

    data, index, eidx = ref["data"], ref["index"], ref["eidx"]
    queries = ref["queries"][0.3][:50]

    ds_path = ref["dir"] / "dataset.bin"
    reloaded_data = load_dataset(ds_path)
    dataset_ok = np.array_equal(reloaded_data.values, data.values)

    idx_path = tmp_path / "index.json"
    save_index(index, idx_path, ds_path)
    reloaded_index = load_index(idx_path)
    loaded_eidx = load_enhanced(ref["dir"])

    def outcome_key(out):
        st = dataclasses.asdict(out.stats)
        st.pop("wall_time_s")
        return (tuple(out.results), tuple(sorted(st.items())))

    identical = 0
    for q in queries:
        same_index = outcome_key(exact_search(index, q, 2)) == outcome_key(
            exact_search(reloaded_index, q, 2)
        )
        req = SearchRequest(query=q, k=1, target=0.99)
        same_enhanced = outcome_key(search(eidx, req)) == outcome_key(search(loaded_eidx, req))
        identical += same_index and same_enhanced

    victim = sorted((ref["dir"] / "filters").glob("*.bin"))[0]
    original = victim.read_bytes()
    corrupted_rejected = False
    try:
        tampered = bytearray(original)
        tampered[40] ^= 0x01
        victim.write_bytes(bytes(tampered))
        try:
            load_enhanced(ref["dir"])
        except ValueError as exc:
            corrupted_rejected = "checksum" in str(exc)
    finally:
        victim.write_bytes(original)

    ok = dataset_ok and identical == len(queries) and corrupted_rejected
    _report(
        13,
        "persistence round-trips outcomes and rejects corruption",
        ok,
        f"(dataset={dataset_ok}, identical={identical}/{len(queries)}, rejects={corrupted_rejected})",
    )
