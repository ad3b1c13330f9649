"""
部署自檢腳本測試
"""

import importlib.util
from pathlib import Path

import pytest

from app.core.config import settings

SCRIPT = Path(__file__).parent.parent / "scripts" / "check_config.py"


@pytest.fixture(scope="module")
def check_config():
    spec = importlib.util.spec_from_file_location("check_config", SCRIPT)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_default_settings_pass(check_config):
    assert check_config.tolerance_problems() == []
    assert check_config.sample_size_problems() == []
    assert check_config.synthesis_problems() == []


def test_builtin_benchmarks_stable_at_nominal(check_config):
    assert check_config.benchmark_problems() == []
    assert check_config.run_checks()


def test_nonnegative_alpha_max_reported(check_config, monkeypatch):
    monkeypatch.setattr(settings, "SYNTH_ALPHA_MAX", 0.0)
    monkeypatch.setattr(settings, "LYAPUNOV_RESIDUAL_WARN", 1e-4)
    problems = check_config.tolerance_problems()
    assert len(problems) == 2
    assert any("SYNTH_ALPHA_MAX" in p for p in problems)
    assert not check_config.run_checks()
