"""
魯棒控制器綜合：活躍配置集合逐步增長的迭代

步驟 1 在活躍配置集合上多模型整定；步驟 2 搜索失穩配置；
步驟 3 搜索性能退化配置；步驟 4 以探索級設置做最終驗證。
"""

import asyncio
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field, model_validator

from app.core.config import settings
from app.core.exceptions import (
    ActiveSetStagnation,
    DimensionMismatchError,
    HardRequirementInfeasible,
    IterationBudgetExhausted,
    NonzeroFeedthroughError,
    RequirementError,
    TunerBudgetExhausted,
)
from app.core.seeding import derive_seed, make_rng
from app.models.schemas import ControllerMatrices, ControllerStructureModel, Requirement
from app.services.nsqp import SqpConfig
from app.services.system_analysis import frequency_response, h2_norm_sq, hinf_norm, spectral_abscissa
from app.services.uncertain_model import LfrPlant, StateSpace, close_controller, close_loop
from app.services.worstcase import (
    MaxObjective,
    SearchReport,
    WorstCaseObjective,
    WorstCaseQuery,
    default_dedup_tol,
    worst_case_searcher,
)
from app.services.explorers import SwarmConfig

MATRIX_KEYS = ("A", "B", "C", "D")
ALLOWED_TRANSITIONS = {1: {2}, 2: {1, 3}, 3: {1, 2, 4}, 4: {1, "end"}}


# ---------------------------------------------------------------------------
# 控制器結構
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControllerStructure:
    """固定階控制器 (Ak, Bk, Ck, Dk) 中可調元素的映射（按 A, B, C, D 行優先排列）"""

    order: int
    n_controls: int
    n_measurements: int
    masks: Dict[str, np.ndarray]
    base: Dict[str, np.ndarray]

    def shape(self, key: str) -> Tuple[int, int]:
        nk, nu, ny = self.order, self.n_controls, self.n_measurements
        return {"A": (nk, nk), "B": (nk, ny), "C": (nu, nk), "D": (nu, ny)}[key]

    @property
    def n_params(self) -> int:
        return int(sum(int(self.masks[key].sum()) for key in MATRIX_KEYS))

    @classmethod
    def from_model(cls, model: ControllerStructureModel, n_controls: int, n_measurements: int) -> "ControllerStructure":
        nk = model.order
        shapes = {"A": (nk, nk), "B": (nk, n_measurements), "C": (n_controls, nk), "D": (n_controls, n_measurements)}
        masks, base = {}, {}
        for key in MATRIX_KEYS:
            shape = shapes[key]
            mask = np.ones(shape, dtype=bool)
            if model.free is not None:
                if key in model.free:
                    mask = np.asarray(model.free[key], dtype=bool).reshape(shape)
                else:
                    mask = np.zeros(shape, dtype=bool)
            init = np.zeros(shape)
            if model.initial is not None and key in model.initial:
                init = np.asarray(model.initial[key], dtype=float)
                if init.shape != shape:
                    raise DimensionMismatchError(f"控制器初值 {key} 形狀 {init.shape}，期望 {shape}")
            masks[key], base[key] = mask, init
        return cls(nk, n_controls, n_measurements, masks, base)

    @classmethod
    def static(cls, n_controls: int, n_measurements: int, initial: Optional[np.ndarray] = None) -> "ControllerStructure":
        D = np.zeros((n_controls, n_measurements)) if initial is None else np.asarray(initial, dtype=float)
        empty = {"A": np.zeros((0, 0)), "B": np.zeros((0, n_measurements)), "C": np.zeros((n_controls, 0))}
        masks = {key: np.zeros(m.shape, dtype=bool) for key, m in empty.items()}
        masks["D"] = np.ones(D.shape, dtype=bool)
        return cls(0, n_controls, n_measurements, masks, {**empty, "D": D})

    def matrices(self, theta: np.ndarray) -> Dict[str, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise DimensionMismatchError(f"控制器參數長度 {theta.size}，期望 {self.n_params}")
        out, offset = {}, 0
        for key in MATRIX_KEYS:
            M = self.base[key].copy()
            count = int(self.masks[key].sum())
            M[self.masks[key]] = theta[offset:offset + count]
            out[key] = M
            offset += count
        return out

    def to_state_space(self, theta: np.ndarray) -> StateSpace:
        m = self.matrices(theta)
        return StateSpace(m["A"], m["B"], m["C"], m["D"])

    def from_state_space(self, ss: StateSpace) -> np.ndarray:
        return np.concatenate([np.asarray(getattr(ss, key))[self.masks[key]] for key in MATRIX_KEYS])

    def initial_params(self) -> np.ndarray:
        return np.concatenate([self.base[key][self.masks[key]] for key in MATRIX_KEYS])


@dataclass(frozen=True)
class ControllerParam:
    values: np.ndarray
    structure: ControllerStructure

    @property
    def state_space(self) -> StateSpace:
        return self.structure.to_state_space(self.values)

    def to_model(self) -> ControllerMatrices:
        ss = self.state_space
        return ControllerMatrices(A=ss.A.tolist(), B=ss.B.tolist(), C=ss.C.tolist(), D=ss.D.tolist())


# ---------------------------------------------------------------------------
# 活躍配置集合與配置
# ---------------------------------------------------------------------------

class ActiveEntry(NamedTuple):
    delta: np.ndarray
    iteration: int
    step: str
    value: Optional[float]


@dataclass
class ActiveSet:
    entries: List[ActiveEntry] = field(default_factory=list)
    dedup_tol: float = 0.0

    @classmethod
    def initial(cls, k: int) -> "ActiveSet":
        return cls([ActiveEntry(np.zeros(k), 0, "init", None)], default_dedup_tol(k))

    @property
    def configurations(self) -> List[np.ndarray]:
        return [e.delta for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, delta: np.ndarray, iteration: int, step: str, value: Optional[float]) -> bool:
        delta = np.asarray(delta, dtype=float).copy()
        if any(np.linalg.norm(delta - e.delta) <= self.dedup_tol for e in self.entries):
            logger.warning(f"配置 δ={np.round(delta, 6).tolist()} 與已有活躍配置重複，未加入")
            return False
        self.entries.append(ActiveEntry(delta, iteration, step, value))
        logger.info(f"活躍配置集合增長到 {len(self.entries)} 個（第 {iteration} 次迭代，{step}）")
        return True

    def to_dict(self) -> Dict[str, Any]:
        return {"configurations": [
            {"delta": e.delta.tolist(), "iteration": e.iteration, "step": e.step, "value": e.value}
            for e in self.entries]}


class TunerConfig(BaseModel):
    restarts: int = Field(default_factory=lambda: settings.TUNER_RESTARTS, ge=0)
    max_evaluations: int = Field(default_factory=lambda: settings.TUNER_MAX_EVALUATIONS, ge=10)
    retries: int = Field(default_factory=lambda: settings.TUNER_RETRIES, ge=0)
    initial_step: float = Field(0.25, gt=0)
    min_step: float = Field(1e-4, gt=0)
    restart_spread: float = Field(0.5, gt=0)


class SynthesisConfig(BaseModel):
    alpha_max: float = Field(default_factory=lambda: settings.SYNTH_ALPHA_MAX, lt=0)
    eps1: float = Field(default_factory=lambda: settings.SYNTH_EPS1, gt=0)
    eps2: float = Field(default_factory=lambda: settings.SYNTH_EPS2, gt=0)
    strategy: Literal["s1", "s2", "s3"] = "s3"
    s3_distance_threshold: Optional[float] = Field(None, gt=0)
    s3_starts: int = Field(4, ge=1)
    validation_runs: int = Field(default_factory=lambda: settings.SYNTH_VALIDATION_RUNS, ge=0)
    max_iterations: int = Field(default_factory=lambda: settings.SYNTH_MAX_ITERATIONS, ge=0)
    seed: int = 0
    workers: int = Field(default_factory=lambda: settings.MAX_WORKERS, ge=1)
    swarm_size: int = Field(100, ge=2)
    stall_iterations: int = Field(10, ge=1)
    refine_step_tol: float = Field(1e-6, gt=0)
    validation_swarm_size: int = Field(default_factory=lambda: settings.PSO_SWARM_SIZE, ge=2)
    validation_stall_iterations: int = Field(default_factory=lambda: settings.PSO_STALL_ITERATIONS, ge=1)
    validation_step_tol: float = Field(default_factory=lambda: settings.SQP_STEP_TOL, gt=0)
    tuner: TunerConfig = Field(default_factory=TunerConfig)

    @model_validator(mode="after")
    def _check(self):
        if self.alpha_max >= 0:
            raise ValueError("alpha_max 必須為負")
        return self

    def distance_threshold(self, k: int) -> float:
        return self.s3_distance_threshold or math.sqrt(max(k, 1))


def validate_requirements(requirements: Sequence[Requirement]) -> Tuple[Requirement, List[Requirement]]:
    """恰好一個軟需求；返回 (軟需求, 硬需求列表)"""
    if not requirements:
        raise RequirementError("需求集合為空")
    soft = [r for r in requirements if r.role == "soft"]
    if len(soft) != 1:
        raise RequirementError(f"必須恰好有一個軟需求，實際 {len(soft)} 個")
    return soft[0], [r for r in requirements if r.role == "hard"]


class ConfigurationEvaluation(NamedTuple):
    alpha: float
    soft: float
    hards: Tuple[float, ...]
    well_posed: bool


def _channel(ss: StateSpace, req: Requirement) -> StateSpace:
    return StateSpace(ss.A, ss.B[:, req.inputs], ss.C[req.outputs, :], ss.D[np.ix_(req.outputs, req.inputs)])


def _requirement_norm(ss: StateSpace, req: Requirement) -> float:
    try:
        if req.norm == "hinf":
            return req.weight * hinf_norm(ss).value
        return req.weight * h2_norm_sq(ss).value_sq
    except NonzeroFeedthroughError:
        return np.inf


def evaluate_configuration(closed_plant: LfrPlant, soft: Requirement, hards: Sequence[Requirement],
                           delta: np.ndarray) -> ConfigurationEvaluation:
    """閉環植物（控制器已閉合）在 δ 處的 α 與加權需求值"""
    closed = close_loop(closed_plant, delta)
    if not closed.well_posed:
        return ConfigurationEvaluation(np.inf, np.inf, tuple(np.inf for _ in hards), False)
    ss = closed.state_space
    alpha = spectral_abscissa(ss.A).value
    if alpha >= 0.0:
        return ConfigurationEvaluation(alpha, np.inf, tuple(np.inf for _ in hards), True)
    return ConfigurationEvaluation(
        alpha, _requirement_norm(_channel(ss, soft), soft),
        tuple(_requirement_norm(_channel(ss, h), h) for h in hards), True)


def aggregate_multiobjective(soft_value: float, hard_values: Sequence[float], beta: float,
                             eps1: float, eps2: float) -> Tuple[float, bool]:
    """
    性能退化檢驗 max{soft/((1+ε1)β), max hard/(1+ε2)}；大於 1 為違反
    """
    if beta <= 0:
        raise ValueError("β 必須為正")
    terms = [soft_value / ((1.0 + eps1) * beta)] + [h / (1.0 + eps2) for h in hard_values]
    test_value = float(max(terms))
    return test_value, test_value > 1.0


def select_distinct_kkt(points: Sequence[Tuple[np.ndarray, float]], threshold: float) -> List[Tuple[np.ndarray, float]]:
    """按最壞優先順序貪心選取，與已選點距離均超過閾值才保留"""
    selected: List[Tuple[np.ndarray, float]] = []
    for delta, value in points:
        delta = np.asarray(delta, dtype=float)
        if all(np.linalg.norm(delta - s) > threshold for s, _ in selected):
            selected.append((delta, value))
    return selected


# ---------------------------------------------------------------------------
# 步驟 1：多模型整定
# ---------------------------------------------------------------------------

class Violation(NamedTuple):
    configuration: int
    kind: str
    value: float


@dataclass
class TunerResult:
    param: ControllerParam
    objective: float
    beta: float
    ledger: List[Violation]
    evaluations: int
    attempts: int

    @property
    def stabilizing(self) -> bool:
        return not any(v.kind == "stability" for v in self.ledger)


class MultiModelTuner:
    """
    無導數多模型整定：最小化活躍配置上的最大加權軟需求，
    硬需求超過 1 與穩定性裕度不足以罰項處理；模式搜索加隨機重啟。
    """

    def __init__(self, plant: LfrPlant, requirements: Sequence[Requirement], structure: ControllerStructure,
                 alpha_max: float, config: TunerConfig, workers: int = 1):
        self.plant = plant
        self.soft, self.hards = validate_requirements(requirements)
        self.structure = structure
        self.alpha_max = alpha_max
        self.config = config
        self.workers = workers

    def evaluate(self, theta: np.ndarray, configurations: Sequence[np.ndarray]) -> List[ConfigurationEvaluation]:
        closed_plant = close_controller(self.plant, self.structure.to_state_space(theta))
        return [evaluate_configuration(closed_plant, self.soft, self.hards, d) for d in configurations]

    def cost(self, theta: np.ndarray, configurations: Sequence[np.ndarray]) -> float:
        try:
            evaluations = self.evaluate(theta, configurations)
        except (DimensionMismatchError, np.linalg.LinAlgError):
            return 1e12
        worst_alpha = max(e.alpha for e in evaluations)
        if worst_alpha > self.alpha_max:
            return 1e6 + min(worst_alpha, 1e6)
        soft = max(e.soft for e in evaluations)
        hard = max((h for e in evaluations for h in e.hards), default=0.0)
        value = soft + 1e4 * max(0.0, hard - 1.0)
        return float(value) if np.isfinite(value) else 1e12

    def _pattern_search(self, theta0: np.ndarray, configurations: Sequence[np.ndarray]) -> Tuple[np.ndarray, float, int]:
        theta = theta0.copy()
        f = self.cost(theta, configurations)
        evaluations = 1
        scale = np.maximum(np.abs(theta0), 1.0)
        step = self.config.initial_step * scale
        min_step = self.config.min_step * scale
        while evaluations < self.config.max_evaluations and np.any(step > min_step):
            improved = False
            for i in range(theta.size):
                for sign in (1.0, -1.0):
                    trial = theta.copy()
                    trial[i] += sign * step[i]
                    ft = self.cost(trial, configurations)
                    evaluations += 1
                    if ft < f:
                        theta, f, improved = trial, ft, True
                        break
                if evaluations >= self.config.max_evaluations:
                    break
            if not improved:
                step *= 0.5
        return theta, f, evaluations

    def _restart_point(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        spread = self.config.restart_spread
        factors = np.exp(spread * rng.standard_normal(theta.size))
        return np.where(theta != 0.0, theta * factors, rng.standard_normal(theta.size))

    def tune(self, configurations: Sequence[np.ndarray], warm_start: np.ndarray, seed: int) -> TunerResult:
        """
        在配置集合上整定；穩定性不滿足時用新的隨機重啟重試

        Returns:
            TunerResult，ledger 列出仍違反的配置（穩定性或硬需求）
        """
        if not configurations:
            raise ValueError("活躍配置集合為空")
        best: Optional[Tuple[np.ndarray, float]] = None
        evaluations = 0
        attempts = 0
        for attempt in range(self.config.retries + 1):
            attempts = attempt + 1
            starts = [warm_start.copy()] if attempt == 0 else []
            for r in range(self.config.restarts):
                starts.append(self._restart_point(warm_start, make_rng(seed, "tuner", attempt, r)))
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(lambda t: self._pattern_search(t, configurations), starts))
            for theta, f, n in results:
                evaluations += n
                if best is None or f < best[1]:
                    best = (theta, f)
            if best[1] < 1e6:
                break
            logger.warning(f"整定第 {attempt + 1} 次未找到鎮定控制器 (J={best[1]:.3e})，重新隨機重啟")

        theta, f = best
        evaluations_at = self.evaluate(theta, configurations)
        ledger: List[Violation] = []
        for i, e in enumerate(evaluations_at):
            if e.alpha > self.alpha_max:
                ledger.append(Violation(i, "stability", float(e.alpha)))
            for h in e.hards:
                if h > 1.0:
                    ledger.append(Violation(i, "hard", float(h)))
        beta = max(e.soft for e in evaluations_at)
        logger.info(f"整定完成: J={f:.6g}, β={beta:.6g}, 違反 {len(ledger)} 項, 評估 {evaluations} 次")
        return TunerResult(ControllerParam(theta, self.structure), float(f), float(beta), ledger, evaluations, attempts)


def tune_multimodel(plant: LfrPlant, requirements: Sequence[Requirement], configurations: Sequence[np.ndarray],
                    structure: ControllerStructure, config: Optional[TunerConfig] = None,
                    warm_start: Optional[np.ndarray] = None, alpha_max: Optional[float] = None,
                    seed: int = 0, workers: int = 1) -> TunerResult:
    tuner = MultiModelTuner(plant, requirements, structure,
                            settings.SYNTH_ALPHA_MAX if alpha_max is None else alpha_max,
                            config or TunerConfig(), workers)
    start = structure.initial_params() if warm_start is None else np.asarray(warm_start, dtype=float)
    return tuner.tune(configurations, start, seed)


# ---------------------------------------------------------------------------
# 軌跡
# ---------------------------------------------------------------------------

@dataclass
class TraceEvent:
    iteration: int
    step: int
    outcome: str
    added: List[np.ndarray] = field(default_factory=list)
    values: Dict[str, Any] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self, include_timings: bool = True) -> Dict[str, Any]:
        out = {"iteration": self.iteration, "step": self.step, "outcome": self.outcome,
               "added": [d.tolist() for d in self.added], "values": self.values}
        if include_timings:
            out["wall_time"] = self.wall_time
        return out


@dataclass
class SynthesisTrace:
    events: List[TraceEvent] = field(default_factory=list)
    active_set_size: int = 1
    ended: bool = False

    def record(self, event: TraceEvent):
        self.events.append(event)

    @property
    def transitions(self) -> List[Any]:
        steps: List[Any] = [e.step for e in self.events]
        return steps + ["end"] if self.ended else steps

    def metrics(self) -> Dict[str, Any]:
        times = {s: sum(e.wall_time for e in self.events if e.step == s) for s in (1, 2, 3, 4)}
        total = sum(times.values())
        step4 = {kind: sum(e.wall_time for e in self.events if e.step == 4 and e.values.get("criterion") == kind)
                 for kind in ("performance", "stability")}
        return {
            "step1_runs": sum(1 for e in self.events if e.step == 1),
            "active_set_size": self.active_set_size,
            "step1_share": times[1] / total if total > 0 else 0.0,
            "step23_share": (times[2] + times[3]) / total if total > 0 else 0.0,
            "step4_performance_time": step4["performance"],
            "step4_stability_time": step4["stability"],
            "total_time": total,
        }

    def to_dict(self, include_timings: bool = True) -> Dict[str, Any]:
        out = {"events": [e.to_dict(include_timings) for e in self.events],
               "transitions": self.transitions, "active_set_size": self.active_set_size}
        if include_timings:
            out["metrics"] = self.metrics()
        return out


def validate_transitions(transitions: Sequence[Any]) -> bool:
    """檢查步驟序列是否為 1→2→{1|3}, 3→{1|2|4}, 4→{1|end} 自動機中的合法路徑"""
    if not transitions:
        return True
    if transitions[0] != 1:
        return False
    for current, following in zip(transitions[:-1], transitions[1:]):
        if current == "end" or following not in ALLOWED_TRANSITIONS.get(current, set()):
            return False
    return True


def summarize_traces(traces: Sequence[SynthesisTrace]) -> Dict[str, Any]:
    """多次重複的指標：步驟 1 次數與活躍集大小的 min/avg/max，時間佔比平均"""
    if not traces:
        return {}
    frame = pd.DataFrame([t.metrics() for t in traces])
    out = {}
    for column in ("step1_runs", "active_set_size"):
        out[column] = {"min": float(frame[column].min()), "avg": float(frame[column].mean()),
                       "max": float(frame[column].max())}
    for column in ("step1_share", "step23_share", "step4_performance_time", "step4_stability_time"):
        out[column] = float(frame[column].mean())
    return out


# ---------------------------------------------------------------------------
# 步驟 2–4 與主循環
# ---------------------------------------------------------------------------

class StepOutcome(NamedTuple):
    kind: str
    deltas: List[np.ndarray]
    worst: Optional[float]
    criterion: Optional[str] = None


@dataclass
class SynthesisResult:
    controller: ControllerParam
    active_set: ActiveSet
    trace: SynthesisTrace
    beta: float
    certified: bool
    validated: bool

    def to_dict(self, include_timings: bool = True) -> Dict[str, Any]:
        return {
            "controller": self.controller.to_model().model_dump(),
            "beta": self.beta,
            "certified": self.certified,
            "validated": self.validated,
            "active_set": self.active_set.to_dict(),
            "trace": self.trace.to_dict(include_timings),
        }


def close_requirement_objective(closed_plant: LfrPlant, requirement: Requirement) -> WorstCaseObjective:
    return WorstCaseObjective(closed_plant.select_channel(requirement.inputs, requirement.outputs), requirement.norm)


class RobustSynthesizer:
    """步驟 1–4 的狀態機"""

    def __init__(self, searcher=worst_case_searcher):
        self.searcher = searcher

    def _query(self, config: SynthesisConfig, kind: str, n_starts: int, seed: int, validation: bool,
               objective_limit: Optional[float]) -> WorstCaseQuery:
        swarm = SwarmConfig(
            swarm_size=config.validation_swarm_size if validation else config.swarm_size,
            stall_iterations=config.validation_stall_iterations if validation else config.stall_iterations,
            objective_limit=objective_limit,
        )
        sqp = SqpConfig(step_tol=config.validation_step_tol if validation else config.refine_step_tol)
        return WorstCaseQuery(kind=kind, explorer="pso", n_starts=n_starts, swarm=swarm, sqp=sqp,
                              seed=seed, workers=config.workers)

    def _n_starts(self, config: SynthesisConfig) -> int:
        return config.s3_starts if config.strategy == "s3" else 1

    def _pick(self, ranked: List[Tuple[np.ndarray, float]], threshold: float, config: SynthesisConfig,
              k: int) -> List[Tuple[np.ndarray, float]]:
        violating = [(d, v) for d, v in ranked if v > threshold]
        if not violating:
            return []
        if config.strategy == "s3":
            return select_distinct_kkt(violating, config.distance_threshold(k))
        return violating[:1]

    async def step2_destabilize(self, plant: LfrPlant, controller: ControllerParam, config: SynthesisConfig,
                                iteration: int, warm_start: Optional[np.ndarray] = None) -> StepOutcome:
        """最大化 α；超過 alpha_max 的最壞配置返回為 added"""
        if plant.k == 0:
            closed = close_loop(close_controller(plant, controller.state_space), np.zeros(0))
            alpha = spectral_abscissa(closed.A).value if closed.well_posed else np.inf
            return StepOutcome("added" if alpha > config.alpha_max else "clean",
                               [np.zeros(0)] if alpha > config.alpha_max else [], float(alpha))

        # 目標為 -α，低於 -alpha_max 即已找到違反點
        limit = -config.alpha_max if config.strategy == "s2" else None
        seed = derive_seed(config.seed, "step2", iteration, 0 if warm_start is None else 1)
        query = self._query(config, "stability", self._n_starts(config), seed, False, limit)
        initial = None if warm_start is None else [warm_start]
        report = await self.searcher.search(plant, query, controller.state_space, initial_points=initial)
        ranked = report.ranked_points()
        picked = self._pick(ranked, config.alpha_max, config, plant.k)
        worst = ranked[0][1] if ranked else None
        if picked:
            return StepOutcome("added", [d for d, _ in picked], worst)
        return StepOutcome("clean", [], worst)

    def _performance_objective(self, plant: LfrPlant, controller: ControllerParam, requirements: Sequence[Requirement],
                               beta: float, config: SynthesisConfig) -> MaxObjective:
        soft, hards = validate_requirements(requirements)
        closed = close_controller(plant, controller.state_space)
        branches = [(close_requirement_objective(closed, soft), soft.weight / ((1.0 + config.eps1) * beta))]
        branches += [(close_requirement_objective(closed, h), h.weight / (1.0 + config.eps2)) for h in hards]
        return MaxObjective(branches)

    async def _performance_search(self, plant: LfrPlant, controller: ControllerParam,
                                  requirements: Sequence[Requirement], beta: float, config: SynthesisConfig,
                                  n_starts: int, seed: int, validation: bool) -> SearchReport:
        objective = self._performance_objective(plant, controller, requirements, beta, config)
        limit = -1.0 if (config.strategy == "s2" and not validation) else None
        query = self._query(config, "hinf", n_starts, seed, validation, limit)
        return await self.searcher.search(plant, query, objective=objective)

    def _nominal_performance(self, plant: LfrPlant, controller: ControllerParam,
                             requirements: Sequence[Requirement], beta: float, config: SynthesisConfig) -> float:
        soft, hards = validate_requirements(requirements)
        e = evaluate_configuration(close_controller(plant, controller.state_space), soft, hards, np.zeros(plant.k))
        return aggregate_multiobjective(e.soft, e.hards, beta, config.eps1, config.eps2)[0]

    async def step3_degrade(self, plant: LfrPlant, controller: ControllerParam, requirements: Sequence[Requirement],
                            beta: float, config: SynthesisConfig, iteration: int) -> StepOutcome:
        """
        最大化性能退化檢驗值；搜索中遇到失穩配置時轉回步驟 2
        """
        if plant.k == 0:
            test = self._nominal_performance(plant, controller, requirements, beta, config)
            return StepOutcome("added" if test > 1.0 else "clean", [np.zeros(0)] if test > 1.0 else [], test)

        seed = derive_seed(config.seed, "step3", iteration)
        report = await self._performance_search(plant, controller, requirements, beta, config,
                                                self._n_starts(config), seed, False)
        if report.destabilizers_found:
            return StepOutcome("divert_to_step2", [report.destabilizers_found[0]], None)
        ranked = report.ranked_points()
        picked = self._pick(ranked, 1.0, config, plant.k)
        worst = ranked[0][1] if ranked else None
        if picked:
            return StepOutcome("added", [d for d, _ in picked], worst)
        return StepOutcome("clean", [], worst)

    async def step4_validate(self, plant: LfrPlant, controller: ControllerParam, requirements: Sequence[Requirement],
                             beta: float, config: SynthesisConfig, iteration: int) -> StepOutcome:
        """
        探索級驗證：先性能後穩定性，每批起點按索引順序檢查，遇到第一個違反即返回
        """
        N = config.validation_runs
        if N == 0:
            return StepOutcome("no_validation", [], None)
        if plant.k == 0:
            return StepOutcome("certified", [], None)

        batch = max(1, config.workers)
        for criterion in ("performance", "stability"):
            for chunk, first in enumerate(range(0, N, batch)):
                n_starts = min(batch, N - first)
                seed = derive_seed(config.seed, "step4", criterion, iteration, chunk)
                if criterion == "performance":
                    report = await self._performance_search(plant, controller, requirements, beta, config,
                                                            n_starts, seed, True)
                    threshold = 1.0
                else:
                    query = self._query(config, "stability", n_starts, seed, True, None)
                    report = await self.searcher.search(plant, query, controller.state_space)
                    threshold = config.alpha_max
                for run in report.runs:
                    if run.destabilizers:
                        return StepOutcome("violation", [run.destabilizers[0]], None, criterion)
                    if run.best_worst is not None and run.best_worst > threshold:
                        return StepOutcome("violation", [run.best_point], run.best_worst, criterion)
        return StepOutcome("certified", [], None)

    @staticmethod
    def _require_growth(added: int, trace: SynthesisTrace, controller: ControllerParam, active_set: ActiveSet):
        """返回步驟 1 前活躍配置集合必須嚴格增長"""
        if added == 0:
            trace.active_set_size = len(active_set)
            raise ActiveSetStagnation(
                f"違反配置均已在活躍集合中（{len(active_set)} 個），整定無法再改進", trace=trace,
                controller=controller, active_set=active_set)

    async def robust_synthesize(self, plant: LfrPlant, requirements: Sequence[Requirement],
                                structure: ControllerStructure,
                                config: Optional[SynthesisConfig] = None) -> SynthesisResult:
        """
        主循環，步驟轉移按 1→2→{1|3}, 3→{1|2|4}, 4→{1|結束}

        Raises:
            TunerBudgetExhausted: 步驟 1 找不到鎮定活躍配置的控制器
            HardRequirementInfeasible: 步驟 1 後硬需求仍超過 1 + eps2
            ActiveSetStagnation: 違反配置全部重複，活躍配置集合無法增長
            IterationBudgetExhausted: 迭代預算用盡（附軌跡）
        """
        config = config or SynthesisConfig()
        validate_requirements(requirements)
        if structure.n_controls != plant.n_controls or structure.n_measurements != plant.n_measurements:
            raise DimensionMismatchError("控制器結構與植物的控制/量測通道不符")
        active_set = ActiveSet.initial(plant.k)
        tuner = MultiModelTuner(plant, requirements, structure, config.alpha_max, config.tuner, config.workers)
        controller = ControllerParam(structure.initial_params(), structure)
        trace = SynthesisTrace()
        beta = np.inf
        iteration = 0
        step = 1
        warm: Optional[np.ndarray] = None
        validated = True
        logger.info(f"開始魯棒綜合: strategy={config.strategy}, k={plant.k}")

        while True:
            t0 = time.perf_counter()
            if step == 1:
                if iteration >= config.max_iterations:
                    trace.active_set_size = len(active_set)
                    raise IterationBudgetExhausted(
                        f"迭代預算 {config.max_iterations} 用盡", trace=trace, controller=controller,
                        active_set=active_set)
                iteration += 1
                result = tuner.tune(active_set.configurations, controller.values,
                                    derive_seed(config.seed, "step1", iteration))
                controller, beta = result.param, result.beta
                trace.record(TraceEvent(iteration, 1, "tuned", values={
                    "beta": beta, "objective": result.objective, "controller": controller.values.tolist(),
                    "violations": [v._asdict() for v in result.ledger]}, wall_time=time.perf_counter() - t0))
                if not result.stabilizing:
                    trace.active_set_size = len(active_set)
                    raise TunerBudgetExhausted("整定器無法鎮定所有活躍配置", best=controller, trace=trace)
                hard = [v for v in result.ledger if v.kind == "hard" and v.value > 1.0 + config.eps2]
                if hard:
                    trace.active_set_size = len(active_set)
                    raise HardRequirementInfeasible(
                        f"硬需求在活躍配置上無法滿足: 最大值 {max(v.value for v in hard):.6g}",
                        violations=hard, trace=trace)
                if not beta > 0.0:
                    raise RequirementError(f"軟需求在活躍配置上的值為 {beta}，無法歸一化")
                step = 2

            elif step == 2:
                outcome = await self.step2_destabilize(plant, controller, config, iteration, warm)
                warm = None
                added = sum(active_set.add(delta, iteration, "step2", outcome.worst) for delta in outcome.deltas)
                trace.record(TraceEvent(iteration, 2, outcome.kind, outcome.deltas, {"worst": outcome.worst},
                                        time.perf_counter() - t0))
                if outcome.kind == "added":
                    self._require_growth(added, trace, controller, active_set)
                step = 1 if outcome.kind == "added" else 3

            elif step == 3:
                outcome = await self.step3_degrade(plant, controller, requirements, beta, config, iteration)
                added = 0
                if outcome.kind == "added":
                    added = sum(active_set.add(delta, iteration, "step3", outcome.worst) for delta in outcome.deltas)
                trace.record(TraceEvent(iteration, 3, outcome.kind, outcome.deltas, {"worst": outcome.worst},
                                        time.perf_counter() - t0))
                if outcome.kind == "divert_to_step2":
                    warm = outcome.deltas[0]
                    step = 2
                elif outcome.kind == "added":
                    self._require_growth(added, trace, controller, active_set)
                    step = 1
                else:
                    step = 4

            else:
                outcome = await self.step4_validate(plant, controller, requirements, beta, config, iteration)
                trace.record(TraceEvent(iteration, 4, outcome.kind, outcome.deltas,
                                        {"worst": outcome.worst, "criterion": outcome.criterion},
                                        time.perf_counter() - t0))
                if outcome.kind == "violation":
                    added = sum(active_set.add(delta, iteration, f"step4_{outcome.criterion}", outcome.worst)
                                for delta in outcome.deltas)
                    self._require_growth(added, trace, controller, active_set)
                    step = 1
                    continue
                validated = outcome.kind != "no_validation"
                trace.ended = True
                break

        trace.active_set_size = len(active_set)
        logger.success(f"魯棒綜合完成: 迭代 {iteration} 次，活躍配置 {len(active_set)} 個，β={beta:.6g}")
        return SynthesisResult(controller, active_set, trace, float(beta), True, validated)


# 創建全局實例
robust_synthesizer = RobustSynthesizer()


def robust_synthesize(plant: LfrPlant, requirements: Sequence[Requirement], structure: ControllerStructure,
                      config: Optional[SynthesisConfig] = None) -> SynthesisResult:
    """同步入口"""
    return asyncio.run(robust_synthesizer.robust_synthesize(plant, requirements, structure, config))


# ---------------------------------------------------------------------------
# 事後檢查與繪圖數據
# ---------------------------------------------------------------------------

def check_configurations(plant: LfrPlant, controller: StateSpace, requirements: Sequence[Requirement],
                         beta: float, config: SynthesisConfig, deltas: Sequence[np.ndarray]) -> List[Violation]:
    """在任意 δ 集合上獨立驗證 α ≤ alpha_max 與性能檢驗不違反；不可行點跳過"""
    soft, hards = validate_requirements(requirements)
    closed_plant = close_controller(plant, controller)
    violations: List[Violation] = []
    for i, delta in enumerate(deltas):
        delta = np.asarray(delta, dtype=float)
        if not plant.constraints.is_feasible(delta):
            continue
        e = evaluate_configuration(closed_plant, soft, hards, delta)
        if e.alpha > config.alpha_max:
            violations.append(Violation(i, "stability", float(e.alpha)))
            continue
        test, violated = aggregate_multiobjective(e.soft, e.hards, beta, config.eps1, config.eps2)
        if violated:
            violations.append(Violation(i, "performance", test))
    return violations


def frequency_sweep(plant: LfrPlant, controller: StateSpace, requirement: Requirement,
                    deltas: Sequence[np.ndarray], omegas: Sequence[float]) -> pd.DataFrame:
    """各 δ 下需求通道的 σ̄(T(jω))；不適定或不穩定的配置跳過"""
    closed_plant = close_controller(plant, controller)
    rows = []
    for i, delta in enumerate(deltas):
        closed = close_loop(closed_plant, delta)
        if not closed.well_posed:
            continue
        ss = _channel(closed.state_space, requirement)
        if spectral_abscissa(ss.A).value >= 0.0:
            continue
        for w in omegas:
            rows.append({"configuration": i, "omega_rad_s": float(w),
                         "sigma_max": float(np.linalg.norm(frequency_response(ss, w), 2))})
    return pd.DataFrame(rows, columns=["configuration", "omega_rad_s", "sigma_max"])
