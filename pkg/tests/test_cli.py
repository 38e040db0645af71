import csv
import json

import numpy as np
import pytest

from leafsearch.cli import (
    CSV_HEADER,
    epsilon_search,
    main,
    recall_at_1,
    run_bench,
    write_bench_report,
)
from leafsearch.series import load_dataset, make_queries
from leafsearch.tree import exact_search, pruning_ratio


@pytest.fixture(scope="module")
def cli_artifacts(tmp_path_factory):
    """Dataset, index, and query files produced through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.bin"
    index = root / "index.json"
    queries = root / "q02.bin"
    assert main(["gen", "--out", str(data), "--n", "1200", "--len", "32", "--seed", "7"]) == 0
    assert main(["build", "--dataset", str(data), "--out", str(index),
                 "--max-leaf-size", "120", "--segments", "8"]) == 0
    assert main(["queries", "--dataset", str(data), "--out", str(queries),
                 "--count", "25", "--noise", "0.2", "--seed", "9"]) == 0
    return {"root": root, "data": data, "index": index, "queries": queries}


class TestGen:
    def test_gen_deterministic(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        for out in (a, b):
            assert main(["gen", "--out", str(out), "--n", "100", "--len", "64", "--seed", "7"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_seed_env_override(self, tmp_path, monkeypatch):
        a, b, c = (tmp_path / n for n in ("a.bin", "b.bin", "c.bin"))
        monkeypatch.setenv("LEAFI_SEED", "111")
        main(["gen", "--out", str(a), "--n", "50", "--len", "16"])
        main(["gen", "--out", str(b), "--n", "50", "--len", "16"])
        monkeypatch.setenv("LEAFI_SEED", "222")
        main(["gen", "--out", str(c), "--n", "50", "--len", "16"])
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes() != c.read_bytes()

    def test_missing_file_error(self, tmp_path, capsys):
        code = main(["build", "--dataset", str(tmp_path / "absent.bin"), "--out", str(tmp_path / "i.json")])
        assert code != 0
        err = capsys.readouterr().err
        assert err.startswith("ERROR ")
        json.loads(err.split(" ", 1)[1])


class TestEpsilonSearch:
    def test_zero_epsilon_identical_to_exact(self, cli_artifacts):
        from leafsearch.tree import load_index

        index = load_index(cli_artifacts["index"])
        data = load_dataset(cli_artifacts["data"])
        for q in make_queries(data, 20, 0.3, seed=11).values:
            a = epsilon_search(index, q, 2, 0.0)
            b = exact_search(index, q, 2)
            assert a.results == b.results

    def test_distance_within_factor(self, cli_artifacts):
        from leafsearch.tree import load_index

        index = load_index(cli_artifacts["index"])
        data = load_dataset(cli_artifacts["data"])
        queries = make_queries(data, 30, 0.25, seed=12).values
        for eps in (0.0, 1.0, 3.0):
            for q in queries:
                approx = epsilon_search(index, q, 1, eps).results[0][1]
                exact = exact_search(index, q, 1).results[0][1]
                assert approx <= (1 + eps) * exact * (1 + 1e-12)

    def test_larger_epsilon_prunes_at_least_as_much(self, cli_artifacts):
        from leafsearch.tree import load_index

        index = load_index(cli_artifacts["index"])
        data = load_dataset(cli_artifacts["data"])
        for q in make_queries(data, 15, 0.3, seed=13).values:
            r1 = pruning_ratio(epsilon_search(index, q, 1, 1.0).stats)
            r3 = pruning_ratio(epsilon_search(index, q, 1, 3.0).stats)
            assert r3 >= r1

    def test_negative_epsilon_rejected(self, cli_artifacts):
        from leafsearch.tree import load_index

        index = load_index(cli_artifacts["index"])
        with pytest.raises(ValueError):
            epsilon_search(index, np.zeros(32), 1, -0.5)


class TestBench:
    def test_exact_method_recall_is_one(self, cli_artifacts):
        from leafsearch.tree import load_index

        index = load_index(cli_artifacts["index"])
        data = load_dataset(cli_artifacts["data"])
        sets = [(0.2, make_queries(data, 10, 0.2, seed=14).values)]
        report = run_bench(index, None, sets, [0.99], ["exact"], seed=5)
        assert all(row["mean_recall"] == 1.0 for row in report["rows"])

    def test_row_grid_complete(self, cli_artifacts):
        from leafsearch.tree import load_index

        index = load_index(cli_artifacts["index"])
        data = load_dataset(cli_artifacts["data"])
        sets = [
            (0.1, make_queries(data, 6, 0.1, seed=15).values),
            (0.3, make_queries(data, 6, 0.3, seed=16).values),
        ]
        report = run_bench(index, None, sets, [0.9, 0.99], ["exact", "epsilon"], seed=6,
                           val_queries=make_queries(data, 10, 0.25, seed=17).values)
        assert len(report["rows"]) == 2 * 2 * 2
        assert report["config"]["epsilon"] in [1.0 + 0.5 * i for i in range(13)]

    def test_csv_json_mirror(self, cli_artifacts, tmp_path):
        from leafsearch.tree import load_index

        index = load_index(cli_artifacts["index"])
        data = load_dataset(cli_artifacts["data"])
        sets = [(0.2, make_queries(data, 8, 0.2, seed=18).values)]
        report = run_bench(index, None, sets, [0.99], ["exact"], seed=7)
        csv_path, json_path = tmp_path / "r.csv", tmp_path / "r.json"
        write_bench_report(report, csv_path, json_path)
        with open(csv_path) as fh:
            rows = list(csv.DictReader(fh))
        mirrored = json.loads(json_path.read_text())["rows"]
        assert len(rows) == len(mirrored)
        for got, expect in zip(rows, mirrored):
            for key in CSV_HEADER:
                if key in ("dataset", "method"):
                    assert got[key] == str(expect[key])
                else:
                    assert float(got[key]) == pytest.approx(float(expect[key]), rel=1e-12)

    def test_recall_distance_tie_fallback(self):
        from leafsearch.tree import SearchOutcome, SearchStats

        outcome = SearchOutcome(results=[(5, 2.0)], stats=SearchStats(n=10))
        assert recall_at_1(outcome, oracle_id=3, oracle_dist=2.0) == 1.0
        assert recall_at_1(outcome, oracle_id=3, oracle_dist=1.0) == 0.0

    def test_rows_reproducible_modulo_timing(self, cli_artifacts):
        from leafsearch.tree import load_index

        index = load_index(cli_artifacts["index"])
        data = load_dataset(cli_artifacts["data"])
        sets = [(0.2, make_queries(data, 10, 0.2, seed=21).values)]
        val = make_queries(data, 10, 0.25, seed=22).values
        a = run_bench(index, None, sets, [0.99], ["exact", "epsilon"], seed=9, val_queries=val)
        b = run_bench(index, None, sets, [0.99], ["exact", "epsilon"], seed=9, val_queries=val)
        timing = {"mean_time_us", "median_time_us"}
        for ra, rb in zip(a["rows"], b["rows"]):
            assert {k: v for k, v in ra.items() if k not in timing} == {
                k: v for k, v in rb.items() if k not in timing
            }

    def test_parallel_matches_sequential(self, cli_artifacts):
        from leafsearch.tree import load_index

        index = load_index(cli_artifacts["index"])
        data = load_dataset(cli_artifacts["data"])
        sets = [(0.2, make_queries(data, 12, 0.2, seed=19).values)]
        seq = run_bench(index, None, sets, [0.99], ["exact"], seed=8)
        par = run_bench(index, None, sets, [0.99], ["exact"], seed=8, parallel=True)
        assert par["config"]["timing_reliable"] is False
        for a, b in zip(seq["rows"], par["rows"]):
            for key in ("mean_recall", "mean_pruning_ratio", "mean_leaves_searched"):
                assert a[key] == b[key]


class TestEnhanceCommand:
    def test_zero_budget_enhance(self, cli_artifacts, capsys, caplog):
        out = cli_artifacts["root"] / "enhanced0"
        code = main([
            "enhance", "--index", str(cli_artifacts["index"]), "--out", str(out),
            "--budget-mb", "0", "--n-global", "40", "--n-local", "10",
            "--calibration", "20", "--seed", "3", "--workers", "1",
        ])
        assert code == 0
        assert "filters=0" in capsys.readouterr().out
        from leafsearch.enhanced import load_enhanced

        assert load_enhanced(out).filters == {}


class TestQueryCommand:
    def test_exact_query_output(self, cli_artifacts, capsys):
        code = main([
            "query", "--index", str(cli_artifacts["index"]),
            "--queries", str(cli_artifacts["queries"]), "--exact", "--k", "2",
        ])
        assert code == 0
        lines = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
        assert len(lines) == 25
        assert all(len(l["results"]) == 2 for l in lines)

    def test_requires_target_or_exact(self, cli_artifacts, capsys):
        code = main([
            "query", "--index", str(cli_artifacts["index"]),
            "--queries", str(cli_artifacts["queries"]), "--target", "0.9",
        ])
        assert code != 0
