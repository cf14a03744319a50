import csv

import numpy as np

from gridem.em import EMConfig
from gridem.sweep import COLUMNS, SweepOptions, as_array, final_accuracy_by_value, run_sweep, write_table

FAST = SweepOptions(T=60, noise=0.01, config=EMConfig(K=4, max_iters=4, split_merge=0))


def test_states_axis_has_baseline_and_em_rows(scenario):
    rows = run_sweep("states", scenario, [1, 2], FAST)
    assert [(r["value"], r["method"], r["K"]) for r in rows] == [
        (1, "baseline", 1), (1, "em", 1), (2, "baseline", 1), (2, "em", 2)]
    assert all(r["status"] == "ok" for r in rows)


def test_failed_point_becomes_error_row(scenario):
    rows = run_sweep("states", scenario, [9], FAST)
    assert len(rows) == 1
    assert rows[0]["status"] == "error" and "ValueError" in rows[0]["message"]


def test_iterations_axis_rows_follow_history(scenario):
    rows = run_sweep("iterations", scenario, [0.01], SweepOptions(T=80, config=EMConfig(K=2, max_iters=3,
                                                                                       split_merge=0),
                                                                 n_states=2))
    assert [r["iteration"] for r in rows] == list(range(1, len(rows) + 1))
    assert 1 <= len(rows) <= 3
    assert final_accuracy_by_value(rows) == {0.01: rows[-1]["label_accuracy"]}


def test_table_is_plot_ready(tmp_path, scenario):
    rows = run_sweep("samples", scenario, [40, 60], FAST)
    path = tmp_path / "t.csv"
    write_table(path, rows)
    with open(path) as fh:
        back = list(csv.DictReader(fh))
    assert list(back[0]) == COLUMNS
    assert [int(r["T"]) for r in back] == [40, 60]
    acc = as_array(back, "label_accuracy")
    assert np.all((acc >= 0) & (acc <= 1))


def test_unknown_axis(scenario):
    import pytest
    with pytest.raises(ValueError):
        run_sweep("colour", scenario)
