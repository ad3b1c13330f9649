"""
最壞情況搜索：全局探索（PSO 或 MC）後接 SQP 精修，多起點並做 KKT 點去重

內部一律以最小化意義工作：stability 最小化 a = -α，hinf 最小化 -‖T‖∞，h2 最小化 -‖T‖₂²。
報告中的 worst 值取回最大化意義。
"""

import asyncio
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field

from app.core.config import settings
from app.core.exceptions import (
    LyapunovSolveError,
    NoConvergenceError,
    NonSimpleActiveEigenvalueError,
    ObjectiveEvaluationFailure,
    RestoreFailed,
    RobustAnalysisError,
)
from app.core.seeding import derive_seed, make_rng
from app.services.explorers import Box, ExplorationResult, McPlan, SwarmConfig, mc_sample, pso_minimize
from app.services.nsqp import FunctionOracle, KktPoint, Oracle, SqpConfig, recertify, sqp_minimize
from app.services.sensitivity import fd_gradient, grad_abscissa, grad_h2, subgrad_hinf
from app.services.system_analysis import h2_norm_sq, hinf_norm, spectral_abscissa
from app.services.uncertain_model import ConstraintSet, LfrPlant, StateSpace, close_controller, close_loop

Kind = Literal["stability", "hinf", "h2"]
ExplorerKind = Literal["pso", "mc", "none"]


class WorstCaseObjective:
    """
    在已閉合控制器、已選通道的植物上計算最壞情況目標

    LFT 不適定或（範數模式下）不穩定時拋出 ObjectiveEvaluationFailure。
    """

    def __init__(self, plant: LfrPlant, kind: Kind):
        if plant.n_controls or plant.n_measurements:
            raise ValueError("目標函數需要已閉合控制通道的植物")
        if kind == "h2":
            plant.check_h2_assumptions()
        self.plant = plant
        self.kind = kind

    def _closed(self, delta: np.ndarray):
        closed = close_loop(self.plant, delta)
        if not closed.well_posed:
            raise ObjectiveEvaluationFailure(delta, "ill_posed")
        return closed

    def _stable_state_space(self, delta: np.ndarray, closed) -> StateSpace:
        ss = closed.state_space
        if ss.n_states and spectral_abscissa(ss.A).value >= 0.0:
            raise ObjectiveEvaluationFailure(delta, "unstable")
        return ss

    def value(self, delta: np.ndarray) -> float:
        return self.value_and_subgradient(delta, with_gradient=False)[0]

    def value_and_subgradient(self, delta: np.ndarray, with_gradient: bool = True) -> Tuple[float, np.ndarray]:
        delta = self.plant.validate_delta(delta)
        closed = self._closed(delta)
        try:
            if self.kind == "stability":
                absres = spectral_abscissa(closed.A)
                if not with_gradient:
                    return -absres.value, np.zeros(0)
                try:
                    g = grad_abscissa(self.plant, delta, absres, closed).values
                except NonSimpleActiveEigenvalueError:
                    logger.debug(f"活躍特徵值非單，改用差分梯度 δ={np.round(delta, 6).tolist()}")
                    g = fd_gradient(self.value, delta)
                return -absres.value, g

            ss = self._stable_state_space(delta, closed)
            if self.kind == "hinf":
                res = hinf_norm(ss)
                g = subgrad_hinf(self.plant, delta, res, closed).values if with_gradient else np.zeros(0)
                return -res.value, g

            res = h2_norm_sq(ss)
            g = grad_h2(self.plant, delta, closed, res).values if with_gradient else np.zeros(0)
            return -res.value_sq, g
        except (NoConvergenceError, LyapunovSolveError) as e:
            raise ObjectiveEvaluationFailure(delta, "numerical", str(e)) from e


class MaxObjective:
    """
    加權最大值 max_r s_r·‖T_r‖ 的最小化形式 min_r s_r·f_r(δ)

    每個分支為上 C¹，取最小仍為上 C¹。
    """

    def __init__(self, branches: Sequence[Tuple[WorstCaseObjective, float]]):
        if not branches:
            raise ValueError("至少需要一個分支")
        self.branches = list(branches)
        self.plant = self.branches[0][0].plant

    def value(self, delta: np.ndarray) -> float:
        return min(scale * obj.value(delta) for obj, scale in self.branches)

    def branch_values(self, delta: np.ndarray) -> List[float]:
        return [scale * obj.value(delta) for obj, scale in self.branches]

    def value_and_subgradient(self, delta: np.ndarray) -> Tuple[float, np.ndarray]:
        values = self.branch_values(delta)
        i = int(np.argmin(values))
        obj, scale = self.branches[i]
        value, g = obj.value_and_subgradient(delta)
        return scale * value, scale * g


class WorstCaseQuery(BaseModel):
    kind: Kind = "stability"
    inputs: Optional[List[int]] = None
    outputs: Optional[List[int]] = None
    explorer: ExplorerKind = "pso"
    n_starts: int = Field(default_factory=lambda: settings.WC_N_STARTS, ge=1)
    mc_samples: int = Field(1000, ge=1)
    sqp: SqpConfig = Field(default_factory=SqpConfig)
    swarm: SwarmConfig = Field(default_factory=SwarmConfig)
    seed: int = 0
    workers: int = Field(default_factory=lambda: settings.MAX_WORKERS, ge=1)
    dedup_tol: Optional[float] = Field(None, gt=0)


@dataclass
class RunRecord:
    index: int
    seed: int
    explorer: str
    explorer_point: Optional[np.ndarray] = None
    explorer_worst: Optional[float] = None
    start: Optional[np.ndarray] = None
    end: Optional[np.ndarray] = None
    refined_worst: Optional[float] = None
    best_point: Optional[np.ndarray] = None
    best_worst: Optional[float] = None
    evaluations: int = 0
    discarded: int = 0
    status: str = "pending"
    certified: bool = False
    destabilizers: List[np.ndarray] = field(default_factory=list)
    ill_posed: List[np.ndarray] = field(default_factory=list)
    kkt: Optional[KktPoint] = None
    error: Optional[str] = None
    wall_time: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "seed": self.seed,
            "explorer": self.explorer,
            "explorer_point": _as_list(self.explorer_point),
            "explorer_worst": self.explorer_worst,
            "start": _as_list(self.start),
            "end": _as_list(self.end),
            "refined_worst": self.refined_worst,
            "best_point": _as_list(self.best_point),
            "best_worst": self.best_worst,
            "evaluations": self.evaluations,
            "discarded": self.discarded,
            "status": self.status,
            "certified": self.certified,
            "destabilized": bool(self.destabilizers),
            "error": self.error,
        }


@dataclass
class KktEntry:
    delta: np.ndarray
    worst: float
    stationarity: float
    complementarity: float
    max_violation: float
    multipliers: np.ndarray
    run: int
    certified: bool

    @property
    def objective(self) -> float:
        return -self.worst

    def to_dict(self) -> Dict[str, Any]:
        return {
            "delta": self.delta.tolist(), "worst": self.worst, "run": self.run,
            "stationarity": self.stationarity, "complementarity": self.complementarity,
            "max_violation": self.max_violation, "multipliers": self.multipliers.tolist(),
            "certified": self.certified,
        }


@dataclass
class SearchReport:
    query: Dict[str, Any]
    runs: List[RunRecord]
    kkt_points: List[KktEntry]
    candidates: List[KktEntry]
    global_best: Optional[int]
    best_candidate: Optional[int]
    best_run: Optional[int]
    destabilizers_found: List[np.ndarray]
    ill_posed_found: List[np.ndarray]
    evaluations: int
    plant_name: str = "plant"

    @property
    def worst_value(self) -> Optional[float]:
        if self.best_run is None:
            return None
        return self.runs[self.best_run].best_worst

    @property
    def worst_point(self) -> Optional[np.ndarray]:
        if self.best_run is None:
            return None
        return self.runs[self.best_run].best_point

    def ranked_points(self) -> List[Tuple[np.ndarray, float]]:
        """各起點最終點，按最壞值降序"""
        points = [(r.best_point, r.best_worst) for r in self.runs if r.best_point is not None]
        return sorted(points, key=lambda item: -item[1])

    def to_dict(self, include_timings: bool = True) -> Dict[str, Any]:
        out = {
            "plant": self.plant_name,
            "query": self.query,
            "runs": [r.to_dict() for r in self.runs],
            "kkt_points": [p.to_dict() for p in self.kkt_points],
            "candidates": [p.to_dict() for p in self.candidates],
            "global_best": self.global_best,
            "best_candidate": self.best_candidate,
            "best_run": self.best_run,
            "worst_value": self.worst_value,
            "worst_point": _as_list(self.worst_point),
            "destabilizers_found": [d.tolist() for d in self.destabilizers_found],
            "ill_posed_found": [d.tolist() for d in self.ill_posed_found],
            "evaluations": self.evaluations,
        }
        if include_timings:
            out["timings"] = {"runs": [r.wall_time for r in self.runs]}
        return out


def _as_list(x: Optional[np.ndarray]) -> Optional[List[float]]:
    return None if x is None else np.asarray(x, dtype=float).tolist()


def default_dedup_tol(k: int) -> float:
    return settings.WC_DEDUP_FACTOR * math.sqrt(max(k, 1))


def dedup_kkt(points: Sequence[Any], distance_tol: float) -> List[Any]:
    """按距離貪心過濾，目標值較差（最壞）者優先保留"""
    ordered = sorted(points, key=lambda p: p.objective)
    kept: List[Any] = []
    for p in ordered:
        x = np.asarray(getattr(p, "delta", getattr(p, "x", None)), dtype=float)
        if all(np.linalg.norm(x - np.asarray(getattr(q, "delta", getattr(q, "x", None)))) > distance_tol
               for q in kept):
            kept.append(p)
    return kept


def _restore_newton(delta: np.ndarray, constraints: ConstraintSet, box: Box, steps: int = 10) -> np.ndarray:
    for _ in range(steps):
        values = constraints.values(delta)
        i = int(np.argmax(values))
        if values[i] <= 0.0:
            break
        grad = constraints.constraints[i].gradient(delta)
        norm_sq = float(grad @ grad)
        if norm_sq == 0.0:
            break
        delta = box.project(delta - (values[i] / norm_sq) * (1.0 + 1e-6) * grad - 1e-12 * grad)
    return delta


def feasibility_restore(delta: np.ndarray, constraints: ConstraintSet, box: Optional[Box] = None,
                        max_iter: Optional[int] = None) -> np.ndarray:
    """
    可行性恢復：盒內最接近的可行點（短 SQP 加 Newton 微調）

    Raises:
        RestoreFailed: 預算內未能達到可行
    """
    delta = np.asarray(delta, dtype=float).copy()
    box = box or Box.unit(delta.size)
    delta = box.project(delta)
    if constraints.is_feasible(delta):
        return delta

    anchor = delta.copy()
    oracle = FunctionOracle(lambda d: 0.5 * float((d - anchor) @ (d - anchor)), lambda d: d - anchor)
    config = SqpConfig(max_iter=max_iter or settings.RESTORE_MAX_ITER)
    try:
        result = sqp_minimize(oracle, constraints, delta, config, bounds=(box.lower, box.upper))
        candidate = box.project(result.x)
    except RobustAnalysisError as e:
        logger.debug(f"可行性恢復 SQP 失敗: {e}")
        candidate = delta
    candidate = _restore_newton(candidate, constraints, box)
    violation = constraints.max_violation(candidate)
    if violation > 0.0:
        raise RestoreFailed(candidate, violation)
    return candidate


def prepare_plant(plant: LfrPlant, controller: Optional[StateSpace] = None,
                  inputs: Optional[Sequence[int]] = None, outputs: Optional[Sequence[int]] = None) -> LfrPlant:
    """選通道並閉合控制器；無控制器時去掉控制/量測通道"""
    selected = plant.select_channel(inputs, outputs)
    if controller is not None:
        return close_controller(selected, controller)
    if selected.n_controls or selected.n_measurements:
        return selected.without_control_channels()
    return selected


def _record_failure(record: "RunRecord", constraints: ConstraintSet, delta: np.ndarray, reason: str):
    """只有可行點上的失敗才算失穩或不適定配置"""
    if not constraints.is_feasible(delta):
        logger.debug(f"忽略不可行點上的{reason}評估 δ={np.round(delta, 6).tolist()}")
        return
    target = record.destabilizers if reason == "unstable" else record.ill_posed
    target.append(np.asarray(delta, dtype=float).copy())


class WorstCaseSearcher:
    """多起點最壞情況搜索器"""

    def _random_feasible(self, constraints: ConstraintSet, box: Box, rng: np.random.Generator) -> np.ndarray:
        for _ in range(settings.MC_ACCEPTANCE_WINDOW):
            delta = box.sample(rng, 1)[0]
            if constraints.is_feasible(delta):
                return delta
        return feasibility_restore(box.sample(rng, 1)[0], constraints, box)

    def _explore(self, objective: Oracle, constraints: ConstraintSet, box: Box, query: WorstCaseQuery,
                 seed: int, rng: np.random.Generator, record: RunRecord) -> Optional[ExplorationResult]:
        if query.explorer == "pso":
            swarm = query.swarm.model_copy(update={"seed": seed, "workers": 1})
            return pso_minimize(objective.value, constraints, box, swarm)
        if query.explorer == "mc":
            plan = McPlan(N=query.mc_samples, seed=seed, workers=1)
            return mc_sample(objective.value, constraints, plan, box)
        record.start = self._random_feasible(constraints, box, rng)
        return None

    def run_start(self, plant: LfrPlant, objective: Oracle, query: WorstCaseQuery, index: int,
                  initial_point: Optional[np.ndarray] = None) -> RunRecord:
        """單個起點：探索、可行性恢復、SQP 精修，並保留較差（最壞）的一個"""
        seed = derive_seed(query.seed, "start", index)
        rng = make_rng(seed, "start")
        record = RunRecord(index, seed, "warm" if initial_point is not None else query.explorer)
        constraints = plant.constraints
        box = Box.unit(plant.k)
        t0 = time.perf_counter()
        try:
            if initial_point is not None:
                record.start = box.project(np.asarray(initial_point, dtype=float))
            else:
                explored = self._explore(objective, constraints, box, query, seed, rng, record)
                if explored is not None:
                    record.evaluations += explored.evaluations
                    record.discarded = explored.discarded
                    for failure in explored.failures:
                        _record_failure(record, constraints, failure.delta, failure.reason)
                    record.start = explored.best_point
                    if explored.feasible:
                        record.explorer_point = explored.best_point.copy()
                        record.explorer_worst = -explored.best_value
                        record.best_point, record.best_worst = record.explorer_point, record.explorer_worst

            record.start = feasibility_restore(record.start, constraints, box)
            record.status = "refining"
            kkt = sqp_minimize(objective, constraints, record.start, query.sqp, bounds=(box.lower, box.upper))
            record.evaluations += kkt.evaluations
            end = box.project(kkt.x)
            if constraints.max_violation(end) > 0.0 or not np.array_equal(end, kkt.x):
                # 舍入造成的微小違反：拉回可行域後在新點上重新求值與驗證 KKT
                end = feasibility_restore(end, constraints, box)
                kkt = recertify(kkt, objective, constraints, end, (box.lower, box.upper), query.sqp.optimality_tol)
                record.evaluations += 1
            record.kkt = kkt
            record.certified = kkt.certified
            record.status = kkt.status
            record.end = kkt.x.copy()
            record.refined_worst = -kkt.objective
            if record.best_worst is None or record.refined_worst >= record.best_worst:
                record.best_point, record.best_worst = end.copy(), record.refined_worst
        except ObjectiveEvaluationFailure as e:
            _record_failure(record, constraints, e.delta, e.reason)
            record.status = f"failed_{e.reason}"
            logger.info(f"起點 {index} 遇到{e.reason}點 δ={np.round(e.delta, 6).tolist()}")
        except RobustAnalysisError as e:
            record.status = "error"
            record.error = str(e)
            logger.warning(f"起點 {index} 失敗: {e}")
        record.wall_time = time.perf_counter() - t0
        return record

    async def search(self, plant: LfrPlant, query: WorstCaseQuery, controller: Optional[StateSpace] = None,
                     initial_points: Optional[Sequence[np.ndarray]] = None,
                     objective: Optional[Oracle] = None) -> SearchReport:
        """
        多起點搜索，起點在線程池中並行，按起點索引順序歸約

        Args:
            plant: 植物（可含控制通道）
            query: 搜索設置
            controller: 可選控制器
            initial_points: 熱啟動點；給定時跳過探索直接 SQP
            objective: 自定義目標（例如 MaxObjective）；默認由 query 構造
        """
        if objective is None:
            closed = prepare_plant(plant, controller, query.inputs, query.outputs)
            objective = WorstCaseObjective(closed, query.kind)
        target_plant = getattr(objective, "plant", plant)
        starts = list(initial_points) if initial_points is not None else [None] * query.n_starts
        logger.info(f"開始最壞情況搜索: kind={query.kind}, explorer={query.explorer}, 起點數={len(starts)}")

        loop = asyncio.get_running_loop()
        with ThreadPoolExecutor(max_workers=query.workers) as pool:
            tasks = [loop.run_in_executor(pool, self.run_start, target_plant, objective, query, i, start)
                     for i, start in enumerate(starts)]
            runs = list(await asyncio.gather(*tasks))

        report = self._assemble(target_plant, query, runs)
        if report.worst_value is not None:
            logger.success(f"最壞情況搜索完成: worst={report.worst_value:.10g}, KKT 點 {len(report.kkt_points)} 個")
        else:
            logger.error("最壞情況搜索沒有得到任何可行結果")
        return report

    def _assemble(self, plant: LfrPlant, query: WorstCaseQuery, runs: List[RunRecord]) -> SearchReport:
        tol = query.dedup_tol or default_dedup_tol(plant.k)
        candidates = []
        for r in runs:
            if r.kkt is None or r.refined_worst is None:
                continue
            candidates.append(KktEntry(
                r.kkt.x.copy(), -r.kkt.objective, r.kkt.stationarity_residual,
                r.kkt.complementarity_residual, r.kkt.max_violation, r.kkt.u.copy(), r.index,
                r.kkt.certified and r.kkt.stationarity_residual <= query.sqp.optimality_tol,
            ))
        candidates = dedup_kkt(candidates, tol)
        kkt_points = [c for c in candidates if c.certified]

        def best_index(entries):
            return None if not entries else int(np.argmax([e.worst for e in entries]))

        finished = [r for r in runs if r.best_worst is not None]
        best_run = None if not finished else max(finished, key=lambda r: (r.best_worst, -r.index)).index
        return SearchReport(
            query=query.model_dump(mode="json"),
            runs=runs,
            kkt_points=kkt_points,
            candidates=candidates,
            global_best=best_index(kkt_points),
            best_candidate=best_index(candidates),
            best_run=best_run,
            destabilizers_found=[d for r in runs for d in r.destabilizers],
            ill_posed_found=[d for r in runs for d in r.ill_posed],
            evaluations=sum(r.evaluations for r in runs),
            plant_name=plant.name,
        )


# 創建全局實例
worst_case_searcher = WorstCaseSearcher()


def wc_search(plant: LfrPlant, query: Optional[WorstCaseQuery] = None,
              controller: Optional[StateSpace] = None,
              initial_points: Optional[Sequence[np.ndarray]] = None) -> SearchReport:
    """同步入口"""
    return asyncio.run(worst_case_searcher.search(plant, query or WorstCaseQuery(), controller, initial_points))


@dataclass
class StudyResult:
    threshold: Optional[float]
    explorer_worst: List[Optional[float]]
    refined_worst: List[Optional[float]]
    successes: int
    seeds: List[int]

    def summary(self, values: List[Optional[float]]) -> Dict[str, Optional[float]]:
        finite = [v for v in values if v is not None]
        if not finite:
            return {"min": None, "median": None, "max": None}
        return {"min": float(np.min(finite)), "median": float(np.median(finite)), "max": float(np.max(finite))}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "seeds": self.seeds,
            "explorer_worst": self.explorer_worst,
            "refined_worst": self.refined_worst,
            "successes": self.successes,
            "explorer_summary": self.summary(self.explorer_worst),
            "refined_summary": self.summary(self.refined_worst),
        }


async def repeat_study(plant: LfrPlant, query: WorstCaseQuery, repeats: int,
                       threshold: Optional[float] = None,
                       controller: Optional[StateSpace] = None) -> StudyResult:
    """
    以不同種子重複搜索，比較僅探索與探索加精修的最壞值

    successes 為精修後最壞值達到 threshold 的次數。
    """
    explorer_worst, refined_worst, seeds = [], [], []
    successes = 0
    for i in range(repeats):
        seed = derive_seed(query.seed, "repeat", i)
        report = await worst_case_searcher.search(plant, query.model_copy(update={"seed": seed}), controller)
        explored = [r.explorer_worst for r in report.runs if r.explorer_worst is not None]
        explorer_worst.append(max(explored) if explored else None)
        refined_worst.append(report.worst_value)
        seeds.append(seed)
        if threshold is not None and report.worst_value is not None and report.worst_value >= threshold:
            successes += 1
    logger.success(f"重複實驗完成: {repeats} 次，成功 {successes} 次")
    return StudyResult(threshold, explorer_worst, refined_worst, successes, seeds)


@dataclass
class McReport:
    """MC 抽樣結果；以概率 1-γ，可行域中 worst 被超過的測度不大於 ε"""

    kind: str
    gamma: Optional[float]
    epsilon: Optional[float]
    samples: int
    evaluations: int
    discarded: int
    worst: Optional[float]
    worst_point: Optional[np.ndarray]
    destabilizers: List[np.ndarray]
    ill_posed: List[np.ndarray]
    seed: int

    @property
    def discarded_fraction(self) -> float:
        drawn = self.evaluations + self.discarded
        return self.discarded / drawn if drawn else 0.0

    def to_dict(self) -> Dict[str, Any]:
        statement = None
        if self.gamma is not None and self.epsilon is not None:
            statement = f"P(measure{{δ: f(δ) > worst}} ≤ {self.epsilon}) ≥ 1 - {self.gamma}"
        return {
            "kind": self.kind,
            "gamma": self.gamma,
            "epsilon": self.epsilon,
            "samples": self.samples,
            "evaluations": self.evaluations,
            "discarded": self.discarded,
            "discarded_fraction": self.discarded_fraction,
            "worst": self.worst,
            "worst_point": _as_list(self.worst_point),
            "destabilizers_found": [d.tolist() for d in self.destabilizers],
            "ill_posed_found": [d.tolist() for d in self.ill_posed],
            "statement": statement,
            "seed": self.seed,
        }


async def mc_analysis(plant: LfrPlant, kind: Kind, plan: McPlan, controller: Optional[StateSpace] = None,
                      inputs: Optional[Sequence[int]] = None,
                      outputs: Optional[Sequence[int]] = None) -> McReport:
    """
    恰好 N 個可行樣本的 MC 最壞值估計

    Raises:
        FeasibleDrawTimeout: 可行樣本接受率過低
    """
    closed = prepare_plant(plant, controller, inputs, outputs)
    objective = WorstCaseObjective(closed, kind)
    logger.info(f"開始 MC 抽樣: kind={kind}, N={plan.N}")
    loop = asyncio.get_running_loop()
    result = await loop.run_in_executor(
        None, lambda: mc_sample(objective.value, closed.constraints, plan, Box.unit(closed.k)))
    worst = -result.best_value if result.feasible else None
    report = McReport(
        kind, plan.gamma, plan.epsilon, int(plan.N), result.evaluations, result.discarded, worst,
        result.best_point if result.feasible else None,
        [f.delta for f in result.failures if f.reason == "unstable"],
        [f.delta for f in result.failures if f.reason != "unstable"],
        plan.seed,
    )
    logger.success(f"MC 抽樣完成: worst={worst}, 丟棄比例 {report.discarded_fraction:.3f}")
    return report
