import csv
import json

import numpy as np
import pytest

from vitastar import bench
from vitastar import vit_guidance as vg
from vitastar.gridmap import OccupancyMap, random_map


def two_maps():
    rng = np.random.default_rng(8)
    return {"noise": random_map(12, 12, 0.25, rng), "empty": OccupancyMap.empty(10, 10)}


@pytest.fixture(scope="module")
def params():
    return vg.ModelParams.init(vg.ModelConfig(patch_size=4, hidden_dim=8, blocks=1, heads=2, n_max=16))


def test_default_trials():
    assert bench.DEFAULT_TRIALS == 25


def test_report_shape_and_success(params):
    report = bench.run_benchmark(two_maps(), bench.PLANNERS, trials=5, seed=3, params=params)
    assert len(report.rows) == 2 * 3
    for row in report.rows:
        assert row.trials == 5 and 0.0 <= row.success_rate <= 1.0
    assert report.row("noise", "classic").success_rate == 1.0
    assert report.row("empty", "classic").success_rate == 1.0


def test_planners_share_instances(params):
    report = bench.run_benchmark(two_maps(), bench.PLANNERS, trials=4, seed=1, params=params)
    for hashes in report.instance_hashes.values():
        assert len(set(hashes.values())) == 1
    again = bench.problems_for_map(two_maps()["noise"], 4, 1, 0)
    assert bench.instance_hash(again) == report.instance_hashes["noise"]["classic"]


def test_uniform_matches_classic_path_cost():
    report = bench.run_benchmark(two_maps(), ["classic", "uniform"], trials=6, seed=0)
    for m in ("noise", "empty"):
        assert report.row(m, "uniform").path_cost_mean == pytest.approx(report.row(m, "classic").path_cost_mean)


def test_expansions_deterministic(params):
    a = bench.run_benchmark(two_maps(), bench.PLANNERS, trials=3, seed=5, params=params)
    b = bench.run_benchmark(two_maps(), bench.PLANNERS, trials=3, seed=5, params=params)
    assert [r.expansions_mean for r in a.rows] == [r.expansions_mean for r in b.rows]
    assert bench.without_timing(a.to_json()) == bench.without_timing(b.to_json())


def test_export_round_trip(tmp_path):
    report = bench.run_benchmark(two_maps(), ["classic", "uniform"], trials=3, seed=17,
                                 config={"note": "x"})
    json_path, csv_path = bench.export_report(report, tmp_path / "r.json")
    loaded = bench.load_report(json_path)
    assert loaded == report
    payload = json.loads(json_path.read_text())
    assert payload["seed"] == 17 and payload["config"] == {"note": "x"}
    assert list(payload["rows"][0]) == list(bench.ROW_FIELDS)
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2
    assert all(r["seed"] == "17" for r in rows)
    assert float(rows[0]["expansions_mean"]) == report.rows[0].expansions_mean


def test_failures_are_recorded_not_raised(monkeypatch):
    def broken(name, params=None, tau=None, conn=None):
        def run(problem):
            raise RuntimeError("boom")
        return run
    monkeypatch.setattr(bench, "make_planner", broken)
    report = bench.run_benchmark({"m": OccupancyMap.empty(8, 8)}, ["classic"], trials=3, seed=0)
    assert report.rows[0].success_rate == 0.0


def test_bad_arguments():
    with pytest.raises(bench.BenchConfigError):
        bench.run_benchmark(two_maps(), ["classic"], trials=0)
    with pytest.raises(bench.BenchConfigError):
        bench.run_benchmark(two_maps(), ["dijkstra"], trials=1)
    with pytest.raises(bench.BenchConfigError):
        bench.run_benchmark(two_maps(), ["vit"], trials=1)
