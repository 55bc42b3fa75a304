import numpy as np
import pytest

from _util import tiny_config, tiny_scene
from mugnet.bench import BenchReport, BenchRow, bench_batched, run_batch
from mugnet.errors import ContractError, ParameterError
from mugnet.model import MuGNet


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_config()
    model = MuGNet(cfg)
    scenes = [tiny_scene(cfg, n_nodes=6, seed=s)[0] for s in range(4)]
    return model, scenes


def test_single_batch_row(setup):
    model, scenes = setup
    report = bench_batched(scenes, [1], model)
    assert len(report.rows) == 1
    row = report.rows[0]
    assert row.mean_s > 0 and row.median_s > 0 and len(row.times) == 5
    assert row.points == scenes[0].graph.num_points
    assert report.trend()["time_ratio"] == [1.0]


def test_rows_follow_batch_sizes(setup):
    model, scenes = setup
    report = bench_batched(scenes, [1, 2, 4], model, repeats=5)
    assert [r.batch_size for r in report.rows] == [1, 2, 4]
    assert "sublinear" in report.format()


@pytest.mark.parametrize("sizes", [[], [0], [1, 9]])
def test_bad_batch_sizes(setup, sizes):
    model, scenes = setup
    with pytest.raises(ParameterError):
        bench_batched(scenes, sizes, model)


def test_too_few_repeats(setup):
    model, scenes = setup
    with pytest.raises(ParameterError):
        bench_batched(scenes, [1], model, repeats=2)


def test_threaded_chunks_match_single_pass(setup):
    model, scenes = setup
    one = run_batch(model, scenes)
    two = run_batch(model, scenes, workers=2)
    assert all(np.array_equal(a, b) for a, b in zip(one, two))


def test_csv_round_trip():
    rows = [BenchRow(1, 1, 100, 0.5, 0.4, 1000), BenchRow(2, 2, 200, 0.75, 0.7, 1500)]
    report = BenchReport(rows)
    back = BenchReport.from_csv(report.to_csv())
    for a, b in zip(rows, back.rows):
        assert (a.batch_size, a.points, a.mean_s, a.peak_mem_bytes) == (b.batch_size, b.points, b.mean_s, b.peak_mem_bytes)
    t = report.trend()
    assert t["time_ratio"] == [1.0, 1.5] and t["sublinear"] and t["memory_monotone"]
    with pytest.raises(ContractError):
        BenchReport([rows[1], rows[0]])
    with pytest.raises(ContractError):
        BenchReport.from_csv("a,b\n1,2\n")
