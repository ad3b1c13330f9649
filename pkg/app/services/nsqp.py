"""
上 C¹ 目標函數的 SQP

有效集 QP 子問題、帶可和容差的價值函數線搜索、保正定的擬牛頓更新與 KKT 驗證。
"""

from dataclasses import dataclass, field, replace
from typing import Callable, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field
from scipy.optimize import linprog, nnls

from app.core.config import settings
from app.core.exceptions import InfeasibleLinearizationError, MaxPivotsError
from app.services.sensitivity import fd_gradient
from app.services.uncertain_model import Constraint, ConstraintSet, halfspace_constraint


class Oracle(Protocol):
    def value(self, x: np.ndarray) -> float: ...

    def value_and_subgradient(self, x: np.ndarray) -> Tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class FunctionOracle:
    """以普通函數包裝的目標；無梯度時用中心差分"""

    fun: Callable[[np.ndarray], float]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def value(self, x: np.ndarray) -> float:
        return float(self.fun(np.asarray(x, dtype=float)))

    def value_and_subgradient(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        g = fd_gradient(self.value, x) if self.grad is None else np.asarray(self.grad(x), dtype=float)
        return self.value(x), g.reshape(-1)


@dataclass(frozen=True)
class UpperC1TestFunction:
    """
    f(x) = min_s F(x, s)，S 為有限分支集合

    次梯度取活躍集 I(x) 中第一個分支的梯度。
    """

    branches: Tuple[Tuple[Callable[[np.ndarray], float], Callable[[np.ndarray], np.ndarray]], ...]
    active_tol: float = 1e-12

    def evaluate(self, x: np.ndarray) -> Tuple[float, List[int]]:
        x = np.asarray(x, dtype=float)
        values = np.array([float(F(x)) for F, _ in self.branches])
        best = float(np.min(values))
        tol = self.active_tol * max(1.0, abs(best))
        return best, [i for i, v in enumerate(values) if v <= best + tol]

    def value(self, x: np.ndarray) -> float:
        return self.evaluate(x)[0]

    def value_and_subgradient(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        value, active = self.evaluate(x)
        return value, np.asarray(self.branches[active[0]][1](np.asarray(x, dtype=float)), dtype=float)

    @classmethod
    def min_of_quadratics(cls, centers: Sequence[np.ndarray], hessians: Sequence[np.ndarray],
                          offsets: Sequence[float]) -> "UpperC1TestFunction":
        branches = []
        for c, Q, b in zip(centers, hessians, offsets):
            c, Q = np.asarray(c, dtype=float), np.asarray(Q, dtype=float)
            branches.append((
                lambda x, c=c, Q=Q, b=b: 0.5 * float((x - c) @ Q @ (x - c)) + b,
                lambda x, c=c, Q=Q: Q @ (x - c),
            ))
        return cls(tuple(branches))

    @classmethod
    def random(cls, dim: int, n_branches: int, rng: np.random.Generator) -> "UpperC1TestFunction":
        centers, hessians, offsets = [], [], []
        for _ in range(n_branches):
            R = rng.standard_normal((dim, dim))
            hessians.append(R @ R.T + 0.5 * np.eye(dim))
            centers.append(rng.uniform(-1.5, 1.5, dim))
            offsets.append(float(rng.uniform(-1.0, 1.0)))
        return cls.min_of_quadratics(centers, hessians, offsets)


@dataclass(frozen=True)
class QpProblem:
    """min ½pᵀHp + gᵀp  s.t.  c + J p ≤ 0"""

    H: np.ndarray
    g: np.ndarray
    J: np.ndarray
    c: np.ndarray

    @property
    def k(self) -> int:
        return self.H.shape[0]

    @property
    def m(self) -> int:
        return self.J.shape[0]


@dataclass(frozen=True)
class QpSolution:
    p: np.ndarray
    u: np.ndarray
    working_set: Tuple[int, ...]
    pivots: int
    relaxed: bool = False
    slack: Optional[np.ndarray] = None


class KktResiduals(NamedTuple):
    stationarity: float
    complementarity: float
    feasibility: float


class SqpConfig(BaseModel):
    optimality_tol: float = Field(default_factory=lambda: settings.SQP_OPTIMALITY_TOL, gt=0)
    step_tol: float = Field(default_factory=lambda: settings.SQP_STEP_TOL, gt=0)
    max_iter: int = Field(default_factory=lambda: settings.SQP_MAX_ITER, ge=1)
    lambda_max: float = Field(default_factory=lambda: settings.SQP_LAMBDA_MAX, gt=0)
    r0: Optional[float] = Field(None, gt=0)
    epsilon0: Optional[float] = Field(None, ge=0)
    epsilon_rho: float = Field(default_factory=lambda: settings.SQP_EPS_RHO, gt=0, lt=1)
    h_min: float = Field(default_factory=lambda: settings.SQP_H_MIN, gt=0)
    h_max: float = Field(default_factory=lambda: settings.SQP_H_MAX, gt=0)
    elastic_penalty: float = Field(default_factory=lambda: settings.SQP_ELASTIC_PENALTY, gt=0)
    line_search_halvings: int = Field(default_factory=lambda: settings.SQP_LINE_SEARCH_HALVINGS, ge=0)

    def epsilon(self, k: int, f0: float) -> float:
        eps0 = self.epsilon0 if self.epsilon0 is not None else 1e-3 * abs(f0) + 1e-6
        return eps0 * self.epsilon_rho ** k


@dataclass
class MeritFunction:
    """θ_r(x) = f(x) + r·Σ max(0, c_i(x))"""

    objective: Callable[[np.ndarray], float]
    constraints: ConstraintSet
    r: float

    def penalty(self, c_values: np.ndarray) -> float:
        return float(np.sum(np.maximum(c_values, 0.0))) if c_values.size else 0.0

    def combine(self, f: float, c_values: np.ndarray) -> float:
        return f + self.r * self.penalty(c_values)

    def __call__(self, x: np.ndarray) -> float:
        return self.combine(float(self.objective(x)), self.constraints.values(x))


class MeritRecord(NamedTuple):
    iteration: int
    before: float
    after: float
    epsilon: float
    r: float
    step: float


class LineSearchResult(NamedTuple):
    step: float
    value: float
    evaluations: int
    stalled: bool


@dataclass
class KktPoint:
    x: np.ndarray
    u: np.ndarray
    objective: float
    stationarity_residual: float
    complementarity_residual: float
    max_violation: float
    iterations: int
    status: str
    certified: bool
    evaluations: int = 0
    r: float = 0.0
    merit_history: List[MeritRecord] = field(default_factory=list)


def kkt_residual(g: np.ndarray, J: np.ndarray, u: np.ndarray, c_values: np.ndarray) -> KktResiduals:
    """(‖g + Jᵀu‖, max|u_i c_i| 與對偶可行性, max(0, c))"""
    g = np.asarray(g, dtype=float)
    J = np.asarray(J, dtype=float).reshape(-1, g.size)
    u = np.asarray(u, dtype=float)
    c_values = np.asarray(c_values, dtype=float)
    stationarity = float(np.linalg.norm(g + J.T @ u)) if u.size else float(np.linalg.norm(g))
    if u.size:
        complementarity = float(max(np.max(np.abs(u * c_values)), np.max(np.maximum(-u, 0.0))))
        feasibility = float(max(0.0, np.max(c_values)))
    else:
        complementarity = feasibility = 0.0
    return KktResiduals(stationarity, complementarity, feasibility)


def _active_set(H: np.ndarray, g: np.ndarray, J: np.ndarray, c: np.ndarray, x0: np.ndarray,
                max_pivots: int, tol: float) -> Tuple[np.ndarray, np.ndarray, List[int], int]:
    """從可行點 x0 出發的原始有效集法"""
    k, m = H.shape[0], J.shape[0]
    x = x0.copy()
    working: List[int] = []
    for pivot in range(max_pivots):
        nw = len(working)
        Jw = J[working] if nw else np.zeros((0, k))
        kkt = np.block([[H, Jw.T], [Jw, np.zeros((nw, nw))]])
        rhs = np.concatenate([-(H @ x + g), np.zeros(nw)])
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        d, lam = sol[:k], sol[k:]

        if np.linalg.norm(d) <= tol * (1.0 + np.linalg.norm(x)):
            if nw == 0 or np.min(lam) >= -tol * (1.0 + np.linalg.norm(g)):
                u = np.zeros(m)
                u[working] = np.maximum(lam, 0.0)
                return x, u, working, pivot
            working.pop(int(np.argmin(lam)))
            continue

        Jd = J @ d
        slack = np.maximum(-(c + J @ x), 0.0)
        t, blocking = 1.0, None
        threshold = tol * np.linalg.norm(d)
        for i in range(m):
            if i in working or Jd[i] <= threshold:
                continue
            ratio = slack[i] / Jd[i]
            if ratio < t:
                t, blocking = ratio, i
        x = x + t * d
        if blocking is not None:
            working.append(blocking)
    raise MaxPivotsError(f"有效集 QP 超過 {max_pivots} 次換基")


def _feasible_start(qp: QpProblem, tol: float) -> np.ndarray:
    if qp.m == 0 or np.max(qp.c) <= tol:
        return np.zeros(qp.k)
    res = linprog(np.zeros(qp.k), A_ub=qp.J, b_ub=-qp.c, bounds=[(None, None)] * qp.k, method="highs")
    if res.status == 0:
        return np.asarray(res.x, dtype=float)

    # 彈性 LP：最小可達違反量作為不可行證書
    A = np.hstack([qp.J, -np.ones((qp.m, 1))])
    bounds = [(None, None)] * qp.k + [(0.0, None)]
    elastic = linprog(np.r_[np.zeros(qp.k), 1.0], A_ub=A, b_ub=-qp.c, bounds=bounds, method="highs")
    certificate = {
        "lp_status": int(res.status),
        "min_max_violation": float(elastic.x[-1]) if elastic.status == 0 else None,
        "max_violation_at_zero": float(np.max(qp.c)),
    }
    raise InfeasibleLinearizationError("線性化約束不可行", certificate=certificate)


def solve_qp(qp: QpProblem, max_pivots: Optional[int] = None, tol: Optional[float] = None) -> QpSolution:
    """
    有效集法求解 QP 子問題

    Raises:
        InfeasibleLinearizationError: 線性化約束無可行點（附最小違反量證書）
        MaxPivotsError: 換基次數超限
    """
    max_pivots = settings.QP_MAX_PIVOTS if max_pivots is None else max_pivots
    tol = settings.QP_TOL if tol is None else tol
    H = 0.5 * (qp.H + qp.H.T)
    x0 = _feasible_start(qp, tol)
    p, u, working, pivots = _active_set(H, qp.g, qp.J, qp.c, x0, max_pivots, tol)
    return QpSolution(p, u, tuple(working), pivots)


def solve_qp_relaxed(qp: QpProblem, penalty: Optional[float] = None,
                     max_pivots: Optional[int] = None, tol: Optional[float] = None) -> QpSolution:
    """
    彈性鬆弛 QP：變量 (p, s)，s ≥ 0，目標加 penalty·Σs + ½‖s‖²

    起點 (0, max(c, 0)) 恆可行。
    """
    penalty = settings.SQP_ELASTIC_PENALTY if penalty is None else penalty
    max_pivots = settings.QP_MAX_PIVOTS if max_pivots is None else max_pivots
    tol = settings.QP_TOL if tol is None else tol
    k, m = qp.k, qp.m
    H = np.block([[0.5 * (qp.H + qp.H.T), np.zeros((k, m))], [np.zeros((m, k)), np.eye(m)]])
    g = np.r_[qp.g, penalty * np.ones(m)]
    J = np.block([[qp.J, -np.eye(m)], [np.zeros((m, k)), -np.eye(m)]])
    c = np.r_[qp.c, np.zeros(m)]
    x0 = np.r_[np.zeros(k), np.maximum(qp.c, 0.0)]
    z, u, working, pivots = _active_set(H, g, J, c, x0, max_pivots, tol)
    return QpSolution(z[:k], u[:m], tuple(w for w in working if w < m), pivots, True, z[k:])


def line_search(merit: Callable[[np.ndarray], float], x: np.ndarray, p: np.ndarray,
                lambda_max: float, epsilon_k: float, theta0: Optional[float] = None,
                halvings: Optional[int] = None) -> LineSearchResult:
    """
    網格 λ_max·2⁻ʲ 上的 argmin

    整個網格都求值，返回值滿足 θ(x + λ_k p) ≤ min_j θ(x + λ_j p) + ε_k（取到最小值，餘量為 ε_k）。
    無網格點改進時步長為 0 並標記停滯。
    """
    if epsilon_k < 0:
        raise ValueError(f"epsilon_k 必須非負: {epsilon_k}")
    halvings = settings.SQP_LINE_SEARCH_HALVINGS if halvings is None else halvings
    theta0 = merit(x) if theta0 is None else theta0
    steps = lambda_max * 0.5 ** np.arange(halvings + 1)
    values = np.array([merit(x + step * p) for step in steps])
    j = int(np.argmin(values))
    if not values[j] < theta0:
        return LineSearchResult(0.0, theta0, steps.size, True)
    return LineSearchResult(float(steps[j]), float(values[j]), steps.size, False)


def bfgs_update(H: np.ndarray, s: np.ndarray, y: np.ndarray,
                h_min: Optional[float] = None, h_max: Optional[float] = None) -> Tuple[np.ndarray, bool]:
    """
    BFGS 更新；sᵀy ≤ 1e-8‖s‖‖y‖ 時跳過

    Returns:
        (H', skipped)，H' 特徵值限制在 [h_min, h_max]
    """
    h_min = settings.SQP_H_MIN if h_min is None else h_min
    h_max = settings.SQP_H_MAX if h_max is None else h_max
    s, y = np.asarray(s, dtype=float), np.asarray(y, dtype=float)
    sy = float(s @ y)
    if sy <= 1e-8 * np.linalg.norm(s) * np.linalg.norm(y) or not np.isfinite(sy):
        return H, True

    Hs = H @ s
    H_new = H - np.outer(Hs, Hs) / float(s @ Hs) + np.outer(y, y) / sy
    H_new = 0.5 * (H_new + H_new.T)
    w, V = np.linalg.eigh(H_new)
    if w[0] < h_min or w[-1] > h_max:
        H_new = (V * np.clip(w, h_min, h_max)) @ V.T
        H_new = 0.5 * (H_new + H_new.T)
    return H_new, False


def _box_constraints(lower: np.ndarray, upper: np.ndarray) -> List[Constraint]:
    rows = []
    for i in range(lower.size):
        e = np.zeros(lower.size)
        e[i] = 1.0
        rows.append(halfspace_constraint(e, upper[i], name=f"upper_{i}"))
        rows.append(halfspace_constraint(-e, -lower[i], name=f"lower_{i}"))
    return rows


def _solve_subproblem(qp: QpProblem, config: SqpConfig) -> QpSolution:
    try:
        return solve_qp(qp)
    except InfeasibleLinearizationError as e:
        logger.warning(f"線性化不可行，改用彈性 QP: {e.certificate}")
        return solve_qp_relaxed(qp, penalty=config.elastic_penalty)


def _certify(g: np.ndarray, J: np.ndarray, c: np.ndarray, u_qp: np.ndarray,
             tol: float) -> Tuple[np.ndarray, KktResiduals]:
    """在 QP 乘子與近活躍約束上的 NNLS 乘子中取殘差較小者"""
    candidates = [u_qp]
    if c.size:
        near = np.nonzero(c >= -max(tol, 1e-9))[0]
        if near.size:
            u_ls, _ = nnls(J[near].T, -g)
            u_full = np.zeros(c.size)
            u_full[near] = u_ls
            candidates.append(u_full)
    scored = [(max(kkt_residual(g, J, u, c)), u) for u in candidates]
    _, u_best = min(scored, key=lambda item: item[0])
    return u_best, kkt_residual(g, J, u_best, c)


def sqp_minimize(oracle: Oracle, constraints: ConstraintSet, x0: np.ndarray,
                 config: Optional[SqpConfig] = None,
                 bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> KktPoint:
    """
    SQP 主循環：QP 方向、價值函數線搜索、阻尼 BFGS

    Args:
        oracle: 目標值與次梯度
        constraints: 光滑不等式約束 c(x) ≤ 0
        x0: 起點
        config: 算法參數
        bounds: 盒約束 (lower, upper)，作為一般線性約束處理

    Returns:
        KktPoint；status 為 kkt / step_tolerance / max_iterations / stalled

    Raises:
        ObjectiveEvaluationFailure: 目標在迭代點或試探點無法求值
    """
    config = config or SqpConfig()
    x = np.asarray(x0, dtype=float).copy()
    cons = constraints
    if bounds is not None:
        lower = np.broadcast_to(np.asarray(bounds[0], dtype=float), x.shape)
        upper = np.broadcast_to(np.asarray(bounds[1], dtype=float), x.shape)
        cons = constraints.extended(*_box_constraints(lower, upper))

    f, g = oracle.value_and_subgradient(x)
    evaluations = 1
    c, J = cons.values(x), cons.jacobian(x)
    f0 = f
    r = config.r0 if config.r0 is not None else 10.0 * (1.0 + float(np.linalg.norm(g)))
    H = np.eye(x.size)
    history: List[MeritRecord] = []
    status = "max_iterations"
    reset_after_stall = False
    u = np.zeros(len(cons))
    iteration = 0

    for iteration in range(config.max_iter):
        sol = _solve_subproblem(QpProblem(H, g, J, c), config)
        p, u = sol.p, sol.u
        res = kkt_residual(g, J, u, c)
        tol = config.optimality_tol
        if not sol.relaxed and max(res) <= tol:
            status = "kkt"
            break

        if not sol.relaxed and u.size and np.max(u) > 0.5 * r:
            r *= 10.0
            H = np.eye(x.size)
            logger.info(f"乘子 {np.max(u):.3e} 超過 r/2，罰參數升至 r={r:.3e} 並重置 H")
            continue

        if np.linalg.norm(p) <= config.step_tol * (1.0 + np.linalg.norm(x)):
            status = "step_tolerance"
            break

        merit = MeritFunction(oracle.value, cons, r)
        theta0 = merit.combine(f, c)
        eps_k = config.epsilon(iteration, f0)
        ls = line_search(merit, x, p, config.lambda_max, eps_k, theta0, config.line_search_halvings)
        evaluations += ls.evaluations
        if ls.stalled:
            if not reset_after_stall:
                reset_after_stall = True
                H = np.eye(x.size)
                logger.debug(f"SQP 第 {iteration} 步線搜索停滯，重置 H")
                continue
            status = "stalled"
            break
        reset_after_stall = False

        x_new = x + ls.step * p
        f_new, g_new = oracle.value_and_subgradient(x_new)
        evaluations += 1
        c_new, J_new = cons.values(x_new), cons.jacobian(x_new)
        s = x_new - x
        y = (g_new + J_new.T @ u) - (g + J.T @ u)
        H, skipped = bfgs_update(H, s, y, config.h_min, config.h_max)
        if skipped:
            logger.debug(f"SQP 第 {iteration} 步跳過 BFGS 更新 (sᵀy={float(s @ y):.3e})")
        history.append(MeritRecord(iteration, theta0, ls.value, eps_k, r, ls.step))
        x, f, g, c, J = x_new, f_new, g_new, c_new, J_new
    else:
        iteration = config.max_iter

    if status != "kkt":
        sol = _solve_subproblem(QpProblem(H, g, J, c), config)
        u = sol.u
    u, res = _certify(g, J, c, u, config.optimality_tol)
    certified = max(res) <= config.optimality_tol
    logger.debug(f"SQP 結束: status={status}, f={f:.10g}, 殘差={tuple(round(v, 12) for v in res)}")
    return KktPoint(
        x=x, u=u, objective=float(f),
        stationarity_residual=res.stationarity,
        complementarity_residual=res.complementarity,
        max_violation=res.feasibility,
        iterations=iteration, status=status, certified=certified,
        evaluations=evaluations, r=r, merit_history=history,
    )


def recertify(kkt: KktPoint, oracle: Oracle, constraints: ConstraintSet, x: np.ndarray,
              bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None,
              optimality_tol: Optional[float] = None) -> KktPoint:
    """
    在移動後的點 x 上重新求值目標、次梯度與 KKT 殘差

    乘子取原 SQP 乘子與近活躍約束 NNLS 乘子中殘差較小者。
    """
    tol = settings.SQP_OPTIMALITY_TOL if optimality_tol is None else optimality_tol
    x = np.asarray(x, dtype=float).copy()
    cons = constraints
    if bounds is not None:
        lower = np.broadcast_to(np.asarray(bounds[0], dtype=float), x.shape)
        upper = np.broadcast_to(np.asarray(bounds[1], dtype=float), x.shape)
        cons = constraints.extended(*_box_constraints(lower, upper))
    f, g = oracle.value_and_subgradient(x)
    c, J = cons.values(x), cons.jacobian(x)
    u_hint = kkt.u if kkt.u.size == c.size else np.zeros(c.size)
    u, res = _certify(g, J, c, u_hint, tol)
    return replace(
        kkt, x=x, u=u, objective=float(f),
        stationarity_residual=res.stationarity, complementarity_residual=res.complementarity,
        max_violation=res.feasibility, certified=max(res) <= tol, evaluations=kkt.evaluations + 1,
    )
