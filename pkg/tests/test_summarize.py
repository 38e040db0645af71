import numpy as np
import pytest

from leafsearch.series import euclidean_distance, generate_randwalk
from leafsearch.summarize import (
    NodeEnvelope,
    envelope_insert,
    lower_bound,
    lower_bound_from_summary,
    segment_config,
    summarize_matrix,
    summarize_series,
)


def naive_segment_means(s, starts, widths):
    out = []
    for start, width in zip(starts, widths):
        total = 0.0
        for i in range(start, start + width):
            total += float(s[i])
        out.append(total / width)
    return np.asarray(out)


class TestSegmentConfig:
    def test_widths_differ_by_at_most_one(self):
        cfg = segment_config(30, 4)
        assert cfg.widths.tolist() == [8, 8, 7, 7]
        assert cfg.starts.tolist() == [0, 8, 16, 23]

    def test_covers_length(self):
        for m, l in [(128, 8), (10, 3), (7, 7), (5, 1)]:
            cfg = segment_config(m, l)
            assert int(cfg.widths.sum()) == m
            assert (cfg.widths >= 1).all()

    def test_invalid(self):
        with pytest.raises(ValueError):
            segment_config(4, 5)
        with pytest.raises(ValueError):
            segment_config(4, 0)


class TestSummarize:
    def test_piecewise_constant(self):
        cfg = segment_config(4, 2)
        assert summarize_series([1, 1, 2, 2], cfg).tolist() == [1.0, 2.0]

    def test_constant_series(self):
        cfg = segment_config(9, 3)
        assert summarize_series([5.0] * 9, cfg).tolist() == [5.0, 5.0, 5.0]

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        s = rng.standard_normal(30)
        cfg = segment_config(30, 4)
        got = summarize_series(s, cfg)
        expected = naive_segment_means(s, cfg.starts, cfg.widths)
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_matrix_matches_per_row(self):
        rng = np.random.default_rng(1)
        values = rng.standard_normal((9, 20))
        cfg = segment_config(20, 6)
        mat = summarize_matrix(values, cfg)
        for i in range(9):
            np.testing.assert_array_equal(mat[i], summarize_series(values[i], cfg))


class TestEnvelope:
    def test_first_insert(self):
        env = NodeEnvelope.empty(3)
        means = np.array([1.0, -2.0, 0.5])
        envelope_insert(env, means)
        assert np.array_equal(env.mean_min, means)
        assert np.array_equal(env.mean_max, means)

    def test_inside_insert_is_noop(self):
        env = NodeEnvelope(np.array([0.0, 0.0]), np.array([2.0, 2.0]))
        envelope_insert(env, np.array([1.0, 1.5]))
        assert env.mean_min.tolist() == [0.0, 0.0]
        assert env.mean_max.tolist() == [2.0, 2.0]

    def test_fifty_inserts_match_fold(self):
        rng = np.random.default_rng(2)
        rows = rng.standard_normal((50, 4))
        env = NodeEnvelope.empty(4)
        for row in rows:
            envelope_insert(env, row)
        np.testing.assert_array_equal(env.mean_min, rows.min(axis=0))
        np.testing.assert_array_equal(env.mean_max, rows.max(axis=0))


class TestLowerBound:
    def test_containment_gives_zero(self):
        rng = np.random.default_rng(3)
        cfg = segment_config(16, 4)
        rows = rng.standard_normal((10, 16))
        env = NodeEnvelope.from_rows(summarize_matrix(rows, cfg))
        assert lower_bound(rows[3], env, cfg) == 0.0

    def test_single_series_node(self):
        rng = np.random.default_rng(4)
        cfg = segment_config(24, 6)
        s = rng.standard_normal(24)
        env = NodeEnvelope.from_rows(summarize_series(s, cfg)[None, :])
        for _ in range(100):
            q = rng.standard_normal(24)
            assert lower_bound(q, env, cfg) <= euclidean_distance(q, s) * (1 + 1e-12)

    def test_soundness_over_random_nodes(self):
        """The load-bearing invariant: lb never exceeds the closest member distance."""
        rng = np.random.default_rng(5)
        data = generate_randwalk(400, 32, seed=6)
        cfg = segment_config(32, 8)
        summs = summarize_matrix(data.values, cfg)
        violations = 0
        for _ in range(1000):
            members = rng.choice(400, size=rng.integers(1, 40), replace=False)
            env = NodeEnvelope.from_rows(summs[members])
            q = data.values[rng.integers(400)] + rng.standard_normal(32) * 0.3
            lb = lower_bound(q, env, cfg)
            closest = min(euclidean_distance(q, data.values[i]) for i in members)
            if lb > closest * (1 + 1e-12):
                violations += 1
        assert violations == 0

    def test_monotone_under_inserts(self):
        rng = np.random.default_rng(7)
        cfg = segment_config(16, 4)
        env = NodeEnvelope.empty(4)
        q = rng.standard_normal(16)
        qsumm = summarize_series(q, cfg)
        prev = np.inf
        for _ in range(30):
            envelope_insert(env, rng.standard_normal(4))
            lb = lower_bound_from_summary(qsumm, env, cfg)
            assert lb <= prev + 1e-15
            prev = lb
