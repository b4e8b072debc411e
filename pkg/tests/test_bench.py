import csv
import io
import math

import numpy as np
import pytest

from distilbench.bench import (BASELINE, MULTISTAGE, TEACHER, CellResult, ComparisonTable,
                               LatencyReport, LatencyRow, SuiteCell, SuiteData, cmd_bench,
                               cmd_compare, nas_reward, time_forward)
from distilbench.data import desk_corpus
from distilbench.training import ProbeConfig, TrainConfig
from distilbench.transformer import ModelConfig, init_parameters


@pytest.mark.parametrize("hs, ls, lt, expected", [
    (0.0, 6.0, 10.0, 1.0),
    (0.0, 10.0, 10.0, (1 / 0.6) ** -0.06),
    (1.0, 3.0, 10.0, 0.0),
    (1.0, 1000.0, 1.0, 0.0),
    (0.25, 1.2, 2.0, 0.75),
])
def test_nas_reward_examples(hs, ls, lt, expected):
    assert nas_reward(hs, ls, lt) == pytest.approx(expected, abs=1e-12)


def test_nas_reward_hand_value():
    assert nas_reward(0.0, 5.0, 5.0) == pytest.approx(0.96982, abs=1e-5)


@pytest.mark.parametrize("args", [(0.1, 0.0, 1.0), (0.1, 1.0, -2.0), (1.5, 1.0, 1.0),
                                  (-0.1, 1.0, 1.0)])
def test_nas_reward_rejects(args):
    with pytest.raises(ValueError):
        nas_reward(*args)


# -- latency -------------------------------------------------------------------------

def test_time_forward_counts_runs():
    model = init_parameters(ModelConfig(1, 2, 8, 16, 20, 8), 0)
    samples = time_forward(model, np.array([[5, 6, 7]]), runs=4, warmup=2)
    assert len(samples) == 4 and all(s > 0 for s in samples)
    with pytest.raises(ValueError):
        time_forward(model, np.array([[5]]), runs=0)


def test_cmd_bench_desk_presets():
    report = cmd_bench(["desk-3l", "desk-teacher"], seq_len=16, runs=5)
    assert [r.preset for r in report.rows] == ["desk-3l", "desk-teacher"]
    for r in report.rows:
        assert r.mean_ms > 0 and r.std_ms >= 0 and len(r.samples_ms) == 5
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert rows[0]["threads"] == "1" and rows[1]["runs"] == "5"
    assert "desk-teacher" in report.render()
    assert report["desk-3l"].seq_len == 16
    with pytest.raises(ValueError, match="at least 5"):
        cmd_bench(["desk-3l"], runs=4)
    with pytest.raises(ValueError, match="exceeds"):
        cmd_bench(["desk-3l"], seq_len=65)


def test_latency_grows_with_sequence_length():
    short = cmd_bench(["desk-teacher"], seq_len=16, runs=5).means()["desk-teacher"]
    long = cmd_bench(["desk-teacher"], seq_len=64, batch=8, runs=5).means()["desk-teacher"]
    assert long >= short


# -- comparison tables ---------------------------------------------------------------

def test_table_csv_render_and_best_marker():
    cells = [CellResult("hs", "last", "3l", [0.55, 0.65, 0.75]),
             CellResult("hs", "uniform", "3l", [0.7, 0.7, 0.7]),
             CellResult("od", "-", "3l", [0.5, 0.5, 0.5]),
             CellResult("minilmv2", "L-1", "3l", [], "failed", "SpecError: nope")]
    table = ComparisonTable(cells, [0, 1, 2])
    table.mark_best()
    assert [c.best_per_method for c in cells] == [False, True, True, False]
    rows = list(csv.DictReader(io.StringIO(table.to_csv())))
    assert rows[0]["mean"] == "65.00" and rows[0]["std"] == "10.00"
    assert rows[0]["seeds"] == "3"
    assert rows[3]["status"] == "failed: SpecError: nope" and rows[3]["mean"] == ""
    text = table.render()
    assert "70.0 ±  0.0*" in text and "failed" in text
    assert math.isnan(cells[3].mean)


def test_suite_cell_labels():
    assert SuiteCell("minilmv2", teacher_layer="L-1").label == "minilmv2:L-1"
    assert SuiteCell(BASELINE).choice == "-"
    assert SuiteCell("hs", "last").spec().strategy == "last"


@pytest.fixture(scope="module")
def tiny_suite():
    _, _, enc = desk_corpus(300, 0, max_len=16)
    teacher = init_parameters(ModelConfig(4, 4, 32, 64, 256, 64), 0)
    data = SuiteData(enc.subset(range(100)), enc.subset(range(100, 160)),
                     enc.subset(range(160, 300)))
    train = TrainConfig.desk("distill", total_steps=3, batch_size=8, seq_len=16)
    od = TrainConfig.desk("od-after-distill", total_steps=3, batch_size=8, seq_len=16)
    cells = [SuiteCell(BASELINE), SuiteCell(TEACHER), SuiteCell("hs", "uniform+last"),
             SuiteCell(MULTISTAGE, "uniform+last"),
             SuiteCell("minilmv2", teacher_layer="L-1", relation_heads=4),
             SuiteCell("minilmv2", teacher_layer="L-3", relation_heads=4)]
    return teacher, data, train, od, cells


def test_compare_is_deterministic_across_workers(tiny_suite):
    teacher, data, train, od, cells = tiny_suite
    probe = ProbeConfig(steps=3, batch_size=8)
    serial = cmd_compare(teacher, ["desk-3l"], cells, data, train, od, probe, seeds=(0, 1))
    threaded = cmd_compare(teacher, ["desk-3l"], cells, data, train, od, probe, seeds=(0, 1),
                           workers=3)
    assert serial.to_csv() == threaded.to_csv()
    assert len(serial.cells) == len(cells)
    failed = serial.get("minilmv2", "desk-3l", "L-3")
    assert failed.status == "failed" and "explored set" in failed.error
    for c in serial.cells:
        if c.status == "ok":
            assert len(c.accuracies) == 2
