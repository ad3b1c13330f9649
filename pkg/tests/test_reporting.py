"""
報告、運行清單與繪圖表測試
"""

import math

import numpy as np
import pandas as pd

from app.core.seeding import derive_seed, make_rng
from app.services.reporting import (
    RunManifest,
    config_hash,
    read_plot_table,
    read_report,
    search_plot_table,
    study_plot_table,
    to_jsonable,
    trace_plot_table,
    write_plot_table,
    write_report,
)
from app.services.worstcase import RunRecord, SearchReport, StudyResult


def _report() -> SearchReport:
    runs = [
        RunRecord(0, 11, "pso", explorer_worst=-0.2, refined_worst=-0.1, best_point=np.array([0.5]),
                  best_worst=-0.1, evaluations=40),
        RunRecord(1, 12, "pso", explorer_worst=0.3, refined_worst=None, best_point=np.array([0.9]),
                  best_worst=0.3, evaluations=25, destabilizers=[np.array([0.95])]),
    ]
    return SearchReport(query={"kind": "stability"}, runs=runs, kkt_points=[], candidates=[], global_best=None,
                        best_candidate=None, best_run=1, destabilizers_found=[np.array([0.95])],
                        ill_posed_found=[], evaluations=65)


def test_to_jsonable():
    payload = to_jsonable({"a": np.array([1.0, np.inf]), "b": np.float64(-np.inf), "c": np.int64(3),
                           "d": (np.bool_(True), math.nan), 4: None})
    assert payload == {"a": [1.0, "inf"], "b": "-inf", "c": 3, "d": [True, "nan"], "4": None}


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1.0, 2.0]}) == config_hash({"b": [1.0, 2.0], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_derive_seed_is_stable():
    assert derive_seed(0, "start", 1) == derive_seed(0, "start", 1)
    assert derive_seed(0, "start", 1) != derive_seed(0, "start", 2)
    assert make_rng(5, "x").random() == make_rng(5, "x").random()


def test_write_and_read_report(tmp_path):
    manifest = RunManifest.create("wc", {"kind": "stability", "seed": 0}, [0])
    result = _report().to_dict(include_timings=False)
    path = write_report(tmp_path / "wc.json", result, manifest.finish(), {"total": 1.5})
    loaded = read_report(path)
    assert loaded["manifest"]["config_hash"] == manifest.config_hash
    assert loaded["result"]["worst_value"] == 0.3
    assert loaded["result"]["runs"][1]["destabilized"] is True

    run_info = read_report(tmp_path / "wc.run.json")
    assert run_info["timings"] == {"total": 1.5}
    assert run_info["wall_clock"] is not None


def test_reports_byte_identical_for_same_manifest(tmp_path):
    """牆鐘時間只寫在旁路文件"""
    result = {"worst": math.inf, "point": np.array([0.1, -0.2])}
    paths = []
    for name in ("first", "second"):
        manifest = RunManifest.create("mc", {"gamma": 0.01, "epsilon": 0.01}, [7])
        paths.append(write_report(tmp_path / f"{name}.json", result, manifest.finish()))
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert read_report(paths[0])["result"]["worst"] == math.inf


def test_search_plot_table_units(tmp_path):
    frame = search_plot_table(_report(), "stability")
    assert list(frame.columns) == ["run", "explorer_worst[1/s]", "refined_worst[1/s]", "best_worst[1/s]",
                                   "evaluations", "destabilized"]
    assert frame["destabilized"].tolist() == [False, True]
    assert "best_worst[gain]" in search_plot_table(_report(), "hinf").columns

    path = write_plot_table(tmp_path / "plots" / "wc.csv", frame)
    loaded = read_plot_table(path)
    assert loaded["evaluations"].tolist() == [40, 25]
    assert loaded["explorer_worst[1/s]"].tolist() == [-0.2, 0.3]


def test_study_and_trace_tables():
    study = StudyResult(threshold=0.0, explorer_worst=[-0.1, None], refined_worst=[0.0, 0.1], successes=2,
                        seeds=[3, 4])
    frame = study_plot_table(study, "h2")
    assert list(frame.columns) == ["repeat", "seed", "explorer_worst[gain^2]", "refined_worst[gain^2]"]
    assert study.to_dict()["explorer_summary"]["max"] == -0.1

    trace = {"events": [{"iteration": 1, "step": 1, "outcome": "tuned", "added": []},
                        {"iteration": 1, "step": 2, "outcome": "added", "added": [[1.0], [-1.0]]}]}
    table = trace_plot_table(trace)
    assert isinstance(table, pd.DataFrame)
    assert table["added"].tolist() == [0, 2]
