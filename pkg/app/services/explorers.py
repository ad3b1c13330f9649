"""
全局探索：盒約束上的罰函數粒子群與蒙特卡羅抽樣
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, model_validator

from app.core.config import settings
from app.core.exceptions import FeasibleDrawTimeout, ObjectiveEvaluationFailure
from app.core.seeding import make_rng
from app.services.uncertain_model import ConstraintSet

Objective = Callable[[np.ndarray], float]


class Box(NamedTuple):
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def unit(cls, k: int) -> "Box":
        return cls(-np.ones(k), np.ones(k))

    @property
    def k(self) -> int:
        return self.lower.size

    def project(self, delta: np.ndarray) -> np.ndarray:
        return np.clip(delta, self.lower, self.upper)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.k))


def project_box(delta: np.ndarray, box: Optional[Box] = None) -> np.ndarray:
    """逐分量截斷到 [-1, 1]（或指定盒）"""
    delta = np.asarray(delta, dtype=float)
    if box is None:
        return np.clip(delta, -1.0, 1.0)
    return box.project(delta)


def mc_sample_size(gamma: float, epsilon: float) -> int:
    """滿足 N ≥ ln γ / ln(1-ε) 的最小整數"""
    if not 0.0 < gamma < 1.0 or not 0.0 < epsilon < 1.0:
        raise ValueError(f"γ 與 ε 必須在 (0, 1) 內: γ={gamma}, ε={epsilon}")
    return max(1, math.ceil(math.log(gamma) / math.log1p(-epsilon)))


class SwarmConfig(BaseModel):
    swarm_size: int = Field(default_factory=lambda: settings.PSO_SWARM_SIZE, ge=2)
    inertia_range: Tuple[float, float] = Field(
        default_factory=lambda: (settings.PSO_INERTIA_LO, settings.PSO_INERTIA_HI))
    stall_iterations: int = Field(default_factory=lambda: settings.PSO_STALL_ITERATIONS, ge=1)
    function_tolerance: float = Field(default_factory=lambda: settings.PSO_FUNCTION_TOLERANCE, ge=0)
    objective_limit: Optional[float] = None
    max_iterations: int = Field(default_factory=lambda: settings.PSO_MAX_ITERATIONS, ge=1)
    seed: int = 0
    tau0: Optional[float] = Field(None, gt=0)
    tau_growth: float = Field(default_factory=lambda: settings.PSO_TAU_GROWTH, gt=1)
    max_escalations: int = Field(default_factory=lambda: settings.PSO_MAX_ESCALATIONS, ge=0)
    cognitive: float = Field(default_factory=lambda: settings.PSO_COGNITIVE, ge=0)
    social: float = Field(default_factory=lambda: settings.PSO_SOCIAL, ge=0)
    workers: int = Field(default_factory=lambda: settings.MAX_WORKERS, ge=1)

    @model_validator(mode="after")
    def _check_inertia(self):
        lo, hi = self.inertia_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"慣性範圍無效: {self.inertia_range}")
        return self


class McPlan(BaseModel):
    gamma: Optional[float] = Field(None, gt=0, lt=1)
    epsilon: Optional[float] = Field(None, gt=0, lt=1)
    N: Optional[int] = Field(None, ge=1)
    seed: int = 0
    workers: int = Field(default_factory=lambda: settings.MAX_WORKERS, ge=1)

    @model_validator(mode="after")
    def _derive_size(self):
        if self.N is None:
            if self.gamma is None or self.epsilon is None:
                raise ValueError("必須給定 N 或 (gamma, epsilon)")
            self.N = mc_sample_size(self.gamma, self.epsilon)
        return self


@dataclass(frozen=True)
class EvaluationFailure:
    delta: np.ndarray
    reason: str


@dataclass
class ExplorationResult:
    best_point: np.ndarray
    best_value: float
    feasible: bool
    evaluations: int
    discarded: int = 0
    history: List[float] = field(default_factory=list)
    failures: List[EvaluationFailure] = field(default_factory=list)
    method: str = "pso"
    escalations: int = 0
    tau: float = 0.0


class _Evaluation(NamedTuple):
    value: float
    violation: float
    failure: Optional[EvaluationFailure]


def _evaluate(objective: Objective, constraints: ConstraintSet, delta: np.ndarray,
              sentinel: float) -> _Evaluation:
    violation = constraints.max_violation(delta)
    try:
        value = float(objective(delta))
    except ObjectiveEvaluationFailure as e:
        return _Evaluation(sentinel, violation, EvaluationFailure(delta.copy(), e.reason))
    if not np.isfinite(value):
        return _Evaluation(sentinel, violation, EvaluationFailure(delta.copy(), "non_finite"))
    return _Evaluation(value, violation, None)


class _FeasibleBest:
    """事後驗證的最佳可行點"""

    def __init__(self):
        self.point: Optional[np.ndarray] = None
        self.value = np.inf

    def offer(self, delta: np.ndarray, ev: _Evaluation):
        if ev.failure is None and ev.violation <= 0.0 and ev.value < self.value:
            self.point, self.value = delta.copy(), ev.value


def particle_streams(seed: int, escalation: int, n: int) -> List[np.random.Generator]:
    """每個粒子一條獨立隨機流，粒子 i 的抽樣與群體大小無關"""
    return [make_rng(seed, "pso", escalation, "particle", i) for i in range(n)]


def _pso_run(objective: Objective, constraints: ConstraintSet, box: Box, config: SwarmConfig,
             tau: float, streams: Sequence[np.random.Generator], pool: ThreadPoolExecutor,
             feasible_best: _FeasibleBest, failures: List[EvaluationFailure]):
    n, k = config.swarm_size, box.k
    span = box.upper - box.lower
    sentinel = settings.PSO_SENTINEL
    evaluations = 0

    def evaluate_swarm(positions: np.ndarray) -> np.ndarray:
        nonlocal evaluations
        results = list(pool.map(lambda d: _evaluate(objective, constraints, d, sentinel), list(positions)))
        evaluations += len(results)
        penalized = np.empty(len(results))
        # 按粒子索引順序歸約
        for i, ev in enumerate(results):
            if ev.failure is not None:
                failures.append(ev.failure)
            feasible_best.offer(positions[i], ev)
            penalized[i] = ev.value + tau * ev.violation
        return penalized

    x = np.array([rng.uniform(box.lower, box.upper) for rng in streams])
    v = np.array([rng.uniform(-span, span) for rng in streams])
    fx = evaluate_swarm(x)
    p, fp = x.copy(), fx.copy()
    g_idx = int(np.argmin(fp))
    g, fg = p[g_idx].copy(), float(fp[g_idx])
    lo, hi = config.inertia_range
    inertia, stall_counter = hi, 0
    history = [fg]

    for iteration in range(config.max_iterations):
        if config.objective_limit is not None and feasible_best.value <= config.objective_limit:
            logger.debug(f"PSO 第 {iteration} 代達到目標下限 {config.objective_limit}")
            break

        u1 = np.empty((n, k))
        u2 = np.empty((n, k))
        for i, rng in enumerate(streams):
            u1[i], u2[i] = rng.random(k), rng.random(k)
        v = inertia * v + config.cognitive * u1 * (p - x) + config.social * u2 * (g - x)
        x = x + v
        clipped = (x < box.lower) | (x > box.upper)
        x = box.project(x)
        v[clipped] = 0.0

        fx = evaluate_swarm(x)
        improved = fx < fp
        p[improved], fp[improved] = x[improved], fx[improved]
        g_idx = int(np.argmin(fp))
        if fp[g_idx] < fg:
            g, fg = p[g_idx].copy(), float(fp[g_idx])
            stall_counter = max(0, stall_counter - 1)
            if stall_counter < 2:
                inertia *= 2.0
            elif stall_counter > 5:
                inertia /= 2.0
            inertia = float(np.clip(inertia, lo, hi))
        else:
            stall_counter += 1
        history.append(fg)

        if len(history) > config.stall_iterations:
            old = history[-1 - config.stall_iterations]
            if (old - fg) / max(1.0, abs(fg)) < config.function_tolerance:
                break

    best_violation = constraints.max_violation(g)
    return g, fg, best_violation, evaluations, history


def pso_minimize(objective: Objective, constraints: ConstraintSet, box: Box,
                 config: Optional[SwarmConfig] = None) -> ExplorationResult:
    """
    罰函數粒子群：min f(δ) + τ·Σ max(0, c_i(δ))，位置每代投影回盒內

    不穩定或不適定的評估取哨兵值並記錄；最佳點違反約束時 τ 乘以 tau_growth 重跑。
    """
    config = config or SwarmConfig()
    failures: List[EvaluationFailure] = []
    feasible_best = _FeasibleBest()
    center = 0.5 * (box.lower + box.upper)

    tau = config.tau0
    if tau is None:
        ev = _evaluate(objective, ConstraintSet(), center, settings.PSO_SENTINEL)
        tau = 1e3 * (1.0 + (abs(ev.value) if ev.failure is None else 0.0))

    evaluations = 0
    history: List[float] = []
    escalations = 0
    g, fg, violation = center, np.inf, np.inf
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        for escalations in range(config.max_escalations + 1):
            streams = particle_streams(config.seed, escalations, config.swarm_size)
            g, fg, violation, n_eval, run_history = _pso_run(
                objective, constraints, box, config, tau, streams, pool, feasible_best, failures)
            evaluations += n_eval
            history.extend(run_history)
            if violation <= 0.0:
                break
            if escalations < config.max_escalations:
                tau *= config.tau_growth
                logger.info(f"PSO 最佳點違反約束 ({violation:.3e})，罰參數升至 τ={tau:.3e}")

    if feasible_best.point is None:
        logger.warning(f"PSO 在 {escalations} 次升級後未找到可行點")
        return ExplorationResult(g, float(fg), False, evaluations, 0, history, failures,
                                 "pso", escalations, tau)
    return ExplorationResult(feasible_best.point, float(feasible_best.value), True, evaluations, 0,
                             history, failures, "pso", escalations, tau)


def mc_sample(objective: Objective, constraints: ConstraintSet, plan: McPlan,
              box: Optional[Box] = None, k: Optional[int] = None) -> ExplorationResult:
    """
    均勻抽樣直到恰有 N 個可行樣本被評估；不可行樣本丟棄並計數

    Raises:
        FeasibleDrawTimeout: 探測窗口內接受率低於下限
    """
    if box is None:
        if k is None:
            raise ValueError("必須給定 box 或參數維度 k")
        box = Box.unit(k)
    rng = make_rng(plan.seed, "mc")
    target = int(plan.N)
    sentinel = settings.PSO_SENTINEL
    window, min_rate = settings.MC_ACCEPTANCE_WINDOW, settings.MC_MIN_ACCEPTANCE

    best_point, best_value = None, np.inf
    evaluations = discarded = 0
    window_drawn = window_accepted = 0
    history: List[float] = []
    failures: List[EvaluationFailure] = []

    with ThreadPoolExecutor(max_workers=plan.workers) as pool:
        while evaluations < target:
            draws = box.sample(rng, settings.MC_BATCH_SIZE)
            accepted = []
            for delta in draws:
                window_drawn += 1
                if constraints.is_feasible(delta):
                    accepted.append(delta)
                    window_accepted += 1
                    if evaluations + len(accepted) == target:
                        break
                else:
                    discarded += 1
            if window_drawn >= window:
                if window_accepted / window_drawn < min_rate:
                    raise FeasibleDrawTimeout(window_drawn, window_accepted)
                window_drawn = window_accepted = 0

            results = list(pool.map(lambda d: _evaluate(objective, ConstraintSet(), d, sentinel), accepted))
            for delta, ev in zip(accepted, results):
                if ev.failure is not None:
                    failures.append(ev.failure)
                elif ev.value < best_value:
                    best_point, best_value = delta.copy(), ev.value
            evaluations += len(results)
            history.append(float(best_value))

    logger.debug(f"MC 抽樣完成: 評估 {evaluations}，丟棄 {discarded}，失敗 {len(failures)}")
    if best_point is None:
        point = failures[0].delta if failures else 0.5 * (box.lower + box.upper)
        return ExplorationResult(point, float(sentinel), False, evaluations, discarded, history,
                                 failures, "mc")
    return ExplorationResult(best_point, float(best_value), True, evaluations, discarded, history,
                             failures, "mc")
