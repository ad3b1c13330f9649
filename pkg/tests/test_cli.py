"""
命令行退出碼與輸出測試
"""

import json

import numpy as np
import pytest

from app.cli import EXIT_BUDGET, EXIT_INPUT, EXIT_OK, EXIT_SEARCH, main
from app.core.config import settings
from app.core.exceptions import ActiveSetStagnation
from app.services.reporting import read_report
from app.services.synthesis import robust_synthesizer
from app.services.uncertain_model import ConstraintSet, dump_model_file, halfspace_constraint, load_model_file
from tests.conftest import make_scalar_plant, make_static_plant


@pytest.fixture
def scalar_model(tmp_path):
    path = tmp_path / "scalar.json"
    dump_model_file(make_scalar_plant(gain=1.0), path)
    return path


def _last_json(capsys):
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    return json.loads(lines[-1])


def test_missing_model_file(tmp_path):
    assert main(["wc", str(tmp_path / "missing.json")]) == EXIT_INPUT


def test_invalid_strategy():
    assert main(["synth", "benchmark:default", "--strategy", "s9"]) == EXIT_INPUT


def test_unknown_benchmark():
    assert main(["mc", "benchmark:nope", "--samples", "10"]) == EXIT_INPUT


def test_h2_on_feedthrough_plant_is_input_error(tmp_path):
    path = tmp_path / "static.json"
    dump_model_file(make_static_plant(), path)
    assert main(["wc", str(path), "--kind", "h2", "--output-dir", str(tmp_path)]) == EXIT_INPUT


def test_mc_sample_size_from_confidence(scalar_model, tmp_path, capsys):
    code = main(["mc", str(scalar_model), "--gamma", "0.01", "--epsilon", "0.01", "--threads", "1",
                 "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    out = _last_json(capsys)
    assert out["samples"] == 459
    report = read_report(out["report"])
    assert report["result"]["evaluations"] == 459
    assert report["manifest"]["command"] == "mc"


def test_mc_infeasible_model(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "MC_ACCEPTANCE_WINDOW", 4096)
    path = tmp_path / "infeasible.json"
    # 0·δ + 1 ≤ 0 處處不可行
    plant = make_scalar_plant(constraints=ConstraintSet((halfspace_constraint([0.0], -1.0),)))
    dump_model_file(plant, path)
    assert main(["mc", str(path), "--samples", "10", "--output-dir", str(tmp_path)]) == EXIT_SEARCH


def test_wc_reports_are_reproducible(scalar_model, tmp_path, capsys):
    reports = []
    for name in ("a", "b"):
        code = main(["wc", str(scalar_model), "--starts", "2", "--threads", "1", "--seed", "4",
                     "--report", str(tmp_path / f"{name}.json")])
        assert code == EXIT_OK
        out = _last_json(capsys)
        assert out["worst"] == pytest.approx(0.0, abs=1e-8)
        reports.append(tmp_path / f"{name}.json")
    assert reports[0].read_bytes() == reports[1].read_bytes()
    assert (tmp_path / "a.csv").is_file()
    assert (tmp_path / "a.run.json").is_file()


def test_study_counts_successes(scalar_model, tmp_path, capsys):
    code = main(["study", str(scalar_model), "--starts", "1", "--repeats", "2", "--threshold", "-1e-6",
                 "--threads", "1", "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    assert _last_json(capsys)["successes"] == 2


def test_synth_budget_exhausted(tmp_path):
    code = main(["synth", "benchmark:default", "--iterations", "0", "--output-dir", str(tmp_path)])
    assert code == EXIT_BUDGET
    report = read_report(tmp_path / "synth.json")
    assert report["result"]["status"] == "budget_exhausted"
    assert len(report["result"]["active_set"]["configurations"]) == 1


def test_synth_stagnation_exit_code(tmp_path, monkeypatch):
    """活躍配置集合無法增長時報告 stagnated，退出碼同搜索失敗"""
    async def stagnate(*args, **kwargs):
        raise ActiveSetStagnation("違反配置均已在活躍集合中")

    monkeypatch.setattr(robust_synthesizer, "robust_synthesize", stagnate)
    code = main(["synth", "benchmark:default", "--output-dir", str(tmp_path)])
    assert code == EXIT_SEARCH
    report = read_report(tmp_path / "synth.json")
    assert report["result"]["status"] == "stagnated"


def test_synth_model_file_requires_config(scalar_model):
    assert main(["synth", str(scalar_model)]) == EXIT_INPUT


def test_export_benchmark(tmp_path):
    assert main(["export", "benchmark:default", "--output-dir", str(tmp_path)]) == EXIT_OK
    plant = load_model_file(tmp_path / "default.model.json")
    assert plant.k == 6
    assert plant.constraints.is_feasible(np.zeros(6))
    controller = json.loads((tmp_path / "default.controller.json").read_text(encoding="utf-8"))
    assert controller["D"] == [[-864.0, -864.0]]
    assert main(["export", "plant.json", "--output-dir", str(tmp_path)]) == EXIT_INPUT
