#!/usr/bin/env python3
"""
部署前的數值自檢

容差設置、Monte-Carlo 樣本數公式、內置基準模型（名義點可行且基線閉環穩定）
以及綜合配置能否解析。任一項失敗時退出碼為 1。
"""

import sys
from pathlib import Path
from typing import Callable, List, Tuple

sys.path.insert(0, str(Path(__file__).parent.parent))

from loguru import logger

from app.core.config import settings
from app.core.exceptions import RobustAnalysisError
from app.core.logging import setup_logging
from app.services.benchmark import available_benchmarks, baseline_controller, default_synthesis_config, load_benchmark
from app.services.explorers import mc_sample_size
from app.services.synthesis import ControllerStructure, SynthesisConfig
from app.services.system_analysis import spectral_abscissa
from app.services.uncertain_model import close_controller, close_loop

Check = Callable[[], List[str]]


def tolerance_problems() -> List[str]:
    problems = []
    if settings.SYNTH_ALPHA_MAX >= 0:
        problems.append(f"SYNTH_ALPHA_MAX={settings.SYNTH_ALPHA_MAX} 必須為負")
    if not 0 < settings.PSO_INERTIA_LO <= settings.PSO_INERTIA_HI:
        problems.append("PSO 慣性範圍無效")
    if not 0 < settings.SQP_H_MIN <= settings.SQP_H_MAX:
        problems.append("SQP Hessian 特徵值界無效")
    if not 0 < settings.SQP_EPS_RHO < 1:
        problems.append("SQP_EPS_RHO 必須在 (0, 1) 內")
    if not 0 < settings.LYAPUNOV_RESIDUAL_WARN <= settings.LYAPUNOV_RESIDUAL_FAIL:
        problems.append("Lyapunov 殘差閾值應滿足 0 < WARN ≤ FAIL")
    if settings.QP_TOL >= settings.SQP_OPTIMALITY_TOL:
        problems.append("QP_TOL 應小於 SQP_OPTIMALITY_TOL")
    return problems


def sample_size_problems() -> List[str]:
    # ln(1e-5)/ln(1-1e-5) 向上取整
    expected = 1151287
    n = mc_sample_size(1e-5, 1e-5)
    return [] if n == expected else [f"mc_sample_size(1e-5, 1e-5) = {n}，應為 {expected}"]


def benchmark_problems() -> List[str]:
    problems = []
    names = available_benchmarks()
    if not names:
        return ["找不到任何內置基準模型"]
    for name in names:
        try:
            plant, spec = load_benchmark(name)
        except RobustAnalysisError as e:
            problems.append(f"{name}: {e}")
            continue
        nominal = plant.nominal_delta()
        if not plant.constraints.is_feasible(nominal):
            problems.append(f"{name}: 名義點不可行")
        closed = close_controller(plant, baseline_controller(spec))
        alpha = spectral_abscissa(close_loop(closed, nominal).A).value
        if alpha >= 0:
            problems.append(f"{name}: 基線控制器名義閉環不穩定 α={alpha:.3g}")
        logger.info(f"{name}: n={plant.n_states}, k={plant.k}, 名義 α={alpha:.4g}")
    return problems


def synthesis_problems() -> List[str]:
    try:
        synthesis = default_synthesis_config()
        plant, _ = load_benchmark("default")
        SynthesisConfig(**synthesis.config)
        ControllerStructure.from_model(synthesis.structure, plant.n_controls, plant.n_measurements)
    except (RobustAnalysisError, ValueError) as e:
        return [f"默認綜合配置無效: {e}"]
    return []


CHECKS: Tuple[Tuple[str, Check], ...] = (
    ("容差設置", tolerance_problems),
    ("MC 樣本數", sample_size_problems),
    ("基準模型", benchmark_problems),
    ("綜合配置", synthesis_problems),
)


def run_checks() -> bool:
    failed = 0
    for name, check in CHECKS:
        try:
            problems = check()
        except Exception as e:
            problems = [f"檢查出錯: {e!r}"]
        for problem in problems:
            logger.error(f"[{name}] {problem}")
        if problems:
            failed += 1
        else:
            logger.info(f"[{name}] 通過")
    logger.info(f"{len(CHECKS) - failed}/{len(CHECKS)} 項通過")
    return failed == 0


if __name__ == "__main__":
    setup_logging(sink=sys.stderr)
    sys.exit(0 if run_checks() else 1)
