"""
不確定 LFR 模型

植物以分塊狀態空間 M(s) 與結構化實不確定性 Δ = diag(δ_i I_{n_i}) 表示，
p = Δ q 閉合後得到參數 δ 處的標稱系統。約束 c_i(δ) ≤ 0 定義物理可行域。
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import (
    ConstraintEvaluationError,
    DimensionMismatchError,
    H2AssumptionError,
    IllPosedLftError,
    ModelFileError,
)
from app.models.schemas import (
    BallParameters,
    BlockEntryModel,
    ConstraintModel,
    HalfspaceParameters,
    ModelFile,
    PolynomialParameters,
    ResidualMassParameters,
)

ArrayLike = Union[np.ndarray, Sequence[float], Sequence[Sequence[float]]]


def _frozen(value: ArrayLike, ndim: int = 2) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim != ndim:
        raise DimensionMismatchError(f"期望 {ndim} 維數組，得到形狀 {arr.shape}")
    arr.setflags(write=False)
    return arr


class StateSpace(NamedTuple):
    """連續時間狀態空間 (A, B, C, D)"""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.D.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.D.shape[0]

    @classmethod
    def static(cls, D: ArrayLike) -> "StateSpace":
        D = np.atleast_2d(np.array(D, dtype=float))
        return cls(np.zeros((0, 0)), np.zeros((0, D.shape[1])), np.zeros((D.shape[0], 0)), D)

    @classmethod
    def from_arrays(cls, A: ArrayLike, B: ArrayLike, C: ArrayLike, D: ArrayLike) -> "StateSpace":
        D = np.atleast_2d(np.array(D, dtype=float))
        A = np.array(A, dtype=float)
        n = int(round(np.sqrt(A.size)))
        A = A.reshape(n, n)
        B = np.array(B, dtype=float).reshape(n, D.shape[1])
        C = np.array(C, dtype=float).reshape(D.shape[0], n)
        return cls(A, B, C, D)


@dataclass(frozen=True)
class BlockStructure:
    """不確定塊結構 Δ = diag(δ_i I_{n_i})"""

    entries: Tuple[Tuple[str, int], ...] = ()

    def __post_init__(self):
        entries = tuple((str(name), int(reps)) for name, reps in self.entries)
        names = [name for name, _ in entries]
        if len(set(names)) != len(names):
            raise DimensionMismatchError(f"不確定參數名稱重複: {names}")
        for name, reps in entries:
            if reps < 1:
                raise DimensionMismatchError(f"參數 {name} 的重複次數必須 ≥ 1")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_repetitions(cls, repetitions: Sequence[int], names: Optional[Sequence[str]] = None) -> "BlockStructure":
        names = names or [f"delta_{i + 1}" for i in range(len(repetitions))]
        return cls(tuple(zip(names, repetitions)))

    @property
    def k(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.entries]

    @property
    def repetitions(self) -> List[int]:
        return [reps for _, reps in self.entries]

    @property
    def total_size(self) -> int:
        return int(sum(self.repetitions))

    def offsets(self) -> List[int]:
        return [int(x) for x in np.concatenate([[0], np.cumsum(self.repetitions)])[:-1]]

    def block_slice(self, i: int) -> slice:
        start = self.offsets()[i]
        return slice(start, start + self.repetitions[i])

    def basis(self, i: int) -> np.ndarray:
        """∂Δ/∂δ_i"""
        basis = np.zeros((self.total_size, self.total_size))
        idx = np.arange(self.total_size)[self.block_slice(i)]
        basis[idx, idx] = 1.0
        return basis


def expand_delta(delta: ArrayLike, blocks: BlockStructure) -> np.ndarray:
    """δ → Δ = diag(δ_i I_{n_i})"""
    delta = np.asarray(delta, dtype=float).reshape(-1)
    if delta.size != blocks.k:
        raise DimensionMismatchError(f"δ 長度 {delta.size} 與塊數 {blocks.k} 不符")
    return np.diag(np.repeat(delta, blocks.repetitions))


def tilde_delta(delta_matrix: np.ndarray, D11: np.ndarray, rcond_threshold: Optional[float] = None) -> np.ndarray:
    """
    Δ̃ = (I - Δ D11)^{-1} Δ = Δ (I - D11 Δ)^{-1}

    Raises:
        IllPosedLftError: I - Δ D11 的倒數條件數低於閾值，或兩種分解不一致
    """
    threshold = settings.ILL_POSED_RCOND if rcond_threshold is None else rcond_threshold
    delta_matrix = np.asarray(delta_matrix, dtype=float)
    D11 = np.asarray(D11, dtype=float)
    n = delta_matrix.shape[0]
    if delta_matrix.shape != (n, n) or D11.shape != (n, n):
        raise DimensionMismatchError(f"Δ {delta_matrix.shape} 與 D11 {D11.shape} 不相容")
    if n == 0:
        return np.zeros((0, 0))

    eye = np.eye(n)
    left = eye - delta_matrix @ D11
    singular_values = np.linalg.svd(left, compute_uv=False)
    rcond = float(singular_values[-1] / singular_values[0]) if singular_values[0] > 0 else 0.0
    if not np.isfinite(rcond) or rcond < threshold:
        raise IllPosedLftError(f"I - ΔD11 奇異 (rcond={rcond:.3e})", rcond=rcond)

    td_left = np.linalg.solve(left, delta_matrix)
    right = eye - D11 @ delta_matrix
    td_right = np.linalg.solve(right.T, delta_matrix.T).T

    scale = max(1.0, float(np.linalg.norm(td_left)))
    tol = max(1e-12, 100.0 * np.finfo(float).eps / rcond)
    if np.linalg.norm(td_left - td_right) > tol * scale:
        raise IllPosedLftError("Δ̃ 的左右分解不一致", rcond=rcond)
    return td_left


@dataclass(frozen=True)
class Constraint:
    """標量約束 c(δ) ≤ 0，可選解析梯度"""

    fun: Callable[[np.ndarray], float]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "c"
    spec: Optional[Dict[str, Any]] = None

    def value(self, delta: np.ndarray) -> float:
        return float(self.fun(np.asarray(delta, dtype=float)))

    def gradient(self, delta: np.ndarray, step: Optional[float] = None) -> np.ndarray:
        delta = np.asarray(delta, dtype=float)
        if self.grad is not None:
            return np.asarray(self.grad(delta), dtype=float).reshape(-1)
        # 無解析梯度時用中心差分
        step = settings.FD_STEP if step is None else step
        g = np.zeros(delta.size)
        for i in range(delta.size):
            e = np.zeros(delta.size)
            e[i] = step
            g[i] = (self.value(delta + e) - self.value(delta - e)) / (2.0 * step)
        return g


@dataclass(frozen=True)
class ConstraintSet:
    """約束集合；可行 ⟺ 所有 c_i(δ) ≤ 0"""

    constraints: Tuple[Constraint, ...] = ()

    def __len__(self) -> int:
        return len(self.constraints)

    def __iter__(self) -> Iterator[Constraint]:
        return iter(self.constraints)

    def values(self, delta: np.ndarray) -> np.ndarray:
        out = np.zeros(len(self.constraints))
        for i, constraint in enumerate(self.constraints):
            try:
                out[i] = constraint.value(delta)
            except Exception as e:
                raise ConstraintEvaluationError(i, e) from e
        return out

    def jacobian(self, delta: np.ndarray) -> np.ndarray:
        delta = np.asarray(delta, dtype=float)
        jac = np.zeros((len(self.constraints), delta.size))
        for i, constraint in enumerate(self.constraints):
            try:
                jac[i] = constraint.gradient(delta)
            except Exception as e:
                raise ConstraintEvaluationError(i, e) from e
        return jac

    def max_violation(self, delta: np.ndarray) -> float:
        if not self.constraints:
            return 0.0
        return float(max(0.0, np.max(self.values(delta))))

    def is_feasible(self, delta: np.ndarray) -> bool:
        return not self.constraints or bool(np.max(self.values(delta)) <= 0.0)

    def extended(self, *constraints: Constraint) -> "ConstraintSet":
        return ConstraintSet(self.constraints + tuple(constraints))


def equality_pair(constraint: Constraint) -> Tuple[Constraint, Constraint]:
    """等式約束 c = 0 表示為 c ≤ 0 與 -c ≤ 0"""
    negated_grad = None
    if constraint.grad is not None:
        negated_grad = lambda d, g=constraint.grad: -np.asarray(g(d), dtype=float)
    positive = constraint
    if constraint.spec is not None:
        positive = replace(constraint, spec={**constraint.spec, "equality": True})
    negated = Constraint(
        fun=lambda d, f=constraint.fun: -float(f(d)),
        grad=negated_grad,
        name=f"{constraint.name}_neg",
        spec={"mirror": True},
    )
    return positive, negated


def ball_constraint(radius: float, center: Optional[ArrayLike] = None, name: str = "ball") -> Constraint:
    """‖δ - center‖² - r² ≤ 0"""
    c0 = None if center is None else np.asarray(center, dtype=float)

    def fun(d):
        x = d if c0 is None else d - c0
        return float(x @ x - radius ** 2)

    def grad(d):
        return 2.0 * (d if c0 is None else d - c0)

    spec = {"type": "builtin", "parameters": {"name": "ball", "radius": radius,
                                              "center": None if c0 is None else c0.tolist()}}
    return Constraint(fun, grad, name, spec)


def halfspace_constraint(normal: ArrayLike, offset: float, name: str = "halfspace") -> Constraint:
    """a·δ - b ≤ 0"""
    a = np.asarray(normal, dtype=float)
    spec = {"type": "builtin", "parameters": {"name": "halfspace", "normal": a.tolist(), "offset": offset}}
    return Constraint(lambda d: float(a @ d - offset), lambda d: a.copy(), name, spec)


def polynomial_constraint(terms: Sequence[Tuple[float, Sequence[int]]], constant: float = 0.0,
                          name: str = "polynomial") -> Constraint:
    """Σ coef·∏ δ_j^{p_j} + constant ≤ 0"""
    coefficients = np.array([float(t[0]) for t in terms])
    powers = np.array([list(t[1]) for t in terms], dtype=int)
    if powers.size == 0:
        powers = np.zeros((len(terms), 0), dtype=int)
    if np.any(powers < 0):
        raise ModelFileError("多項式冪次必須非負")

    def fun(d):
        if not len(terms):
            return float(constant)
        return float(coefficients @ np.prod(d[None, :] ** powers, axis=1) + constant)

    def grad(d):
        g = np.zeros(d.size)
        for coef, row in zip(coefficients, powers):
            for j in np.nonzero(row)[0]:
                reduced = row.copy()
                reduced[j] -= 1
                g[j] += coef * row[j] * np.prod(d ** reduced)
        return g

    spec = {"type": "polynomial", "parameters": {
        "terms": [{"coefficient": float(c), "powers": [int(p) for p in row]} for c, row in zip(coefficients, powers)],
        "constant": constant}}
    return Constraint(fun, grad, name, spec)


@dataclass(frozen=True)
class AffineResidualMass:
    """M_r(δ) = M_P(δ) - L_P(δ)ᵀ L_P(δ)，M_P 與 L_P 對 δ 仿射"""

    M0: np.ndarray
    M_terms: Tuple[np.ndarray, ...]
    L0: np.ndarray
    L_terms: Tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "M0", _frozen(self.M0))
        object.__setattr__(self, "L0", _frozen(self.L0))
        object.__setattr__(self, "M_terms", tuple(_frozen(m) for m in self.M_terms))
        object.__setattr__(self, "L_terms", tuple(_frozen(m) for m in self.L_terms))
        if len(self.M_terms) != len(self.L_terms):
            raise DimensionMismatchError("M_P 與 L_P 的參數項數不一致")
        dof = self.M0.shape[0]
        if self.M0.shape != (dof, dof) or self.L0.shape[1] != dof:
            raise DimensionMismatchError("殘餘質量矩陣維度不一致")

    @property
    def k(self) -> int:
        return len(self.M_terms)

    def mass(self, delta: np.ndarray) -> np.ndarray:
        return self.M0 + sum(d * m for d, m in zip(delta, self.M_terms))

    def participation(self, delta: np.ndarray) -> np.ndarray:
        return self.L0 + sum(d * m for d, m in zip(delta, self.L_terms))

    def residual(self, delta: np.ndarray) -> np.ndarray:
        L = self.participation(delta)
        Mr = self.mass(delta) - L.T @ L
        return 0.5 * (Mr + Mr.T)

    def residual_derivatives(self, delta: np.ndarray) -> List[np.ndarray]:
        L = self.participation(delta)
        out = []
        for Mi, Li in zip(self.M_terms, self.L_terms):
            dMr = Mi - (Li.T @ L + L.T @ Li)
            out.append(0.5 * (dMr + dMr.T))
        return out

    def constraint_value(self, delta: np.ndarray) -> float:
        # α(-M_r) = -λ_min(M_r)
        return float(-np.linalg.eigvalsh(self.residual(delta))[0])

    def constraint_gradient(self, delta: np.ndarray) -> np.ndarray:
        w, V = np.linalg.eigh(self.residual(delta))
        v = V[:, 0]
        return np.array([-(v @ dMr @ v) for dMr in self.residual_derivatives(delta)])

    def as_constraint(self, name: str = "residual_mass") -> Constraint:
        spec = {"type": "residual_mass", "parameters": {
            "M0": self.M0.tolist(), "M_terms": [m.tolist() for m in self.M_terms],
            "L0": self.L0.tolist(), "L_terms": [m.tolist() for m in self.L_terms]}}
        return Constraint(self.constraint_value, self.constraint_gradient, name, spec)


@dataclass(frozen=True)
class ClosedLoop:
    """δ 處閉合上 LFT 後的系統"""

    A: Optional[np.ndarray]
    B: Optional[np.ndarray]
    C: Optional[np.ndarray]
    D: Optional[np.ndarray]
    tilde_delta: Optional[np.ndarray]
    delta_matrix: np.ndarray
    well_posed: bool
    rcond: float = 1.0

    @property
    def state_space(self) -> StateSpace:
        if not self.well_posed:
            raise IllPosedLftError("LFT 不適定，無閉環系統", rcond=self.rcond)
        return StateSpace(self.A, self.B, self.C, self.D)


@dataclass(frozen=True)
class LfrPlant:
    """
    分塊植物

        ẋ = A1 x + B1 p + B2 w
        q = C1 x + D11 p + D12 w
        z = C2 x + D21 p + D22 w,    p = Δ q

    w 的最後 n_controls 列為控制輸入 u，z 的最後 n_measurements 行為量測 y。
    """

    A1: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    D11: np.ndarray
    D12: np.ndarray
    D21: np.ndarray
    D22: np.ndarray
    blocks: BlockStructure
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    name: str = "plant"
    n_controls: int = 0
    n_measurements: int = 0

    def __post_init__(self):
        for key in ("A1", "B1", "B2", "C1", "C2", "D11", "D12", "D21", "D22"):
            object.__setattr__(self, key, _frozen(getattr(self, key)))
        n, n_p = self.A1.shape[0], self.blocks.total_size
        n_w, n_z = self.B2.shape[1], self.C2.shape[0]
        expected = {
            "A1": (n, n), "B1": (n, n_p), "B2": (n, n_w),
            "C1": (n_p, n), "C2": (n_z, n),
            "D11": (n_p, n_p), "D12": (n_p, n_w),
            "D21": (n_z, n_p), "D22": (n_z, n_w),
        }
        for key, shape in expected.items():
            if getattr(self, key).shape != shape:
                raise DimensionMismatchError(f"{key} 形狀 {getattr(self, key).shape}，期望 {shape}")
        if not 0 <= self.n_controls <= n_w or not 0 <= self.n_measurements <= n_z:
            raise DimensionMismatchError("控制/量測通道數超出輸入/輸出維度")

    @property
    def n_states(self) -> int:
        return self.A1.shape[0]

    @property
    def k(self) -> int:
        return self.blocks.k

    @property
    def n_inputs(self) -> int:
        return self.B2.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.C2.shape[0]

    @property
    def n_perf_inputs(self) -> int:
        return self.n_inputs - self.n_controls

    @property
    def n_perf_outputs(self) -> int:
        return self.n_outputs - self.n_measurements

    def validate_delta(self, delta: ArrayLike) -> np.ndarray:
        delta = np.asarray(delta, dtype=float).reshape(-1)
        if delta.size != self.k:
            raise DimensionMismatchError(f"δ 長度 {delta.size}，期望 {self.k}")
        return delta

    def nominal_delta(self) -> np.ndarray:
        return np.zeros(self.k)

    def with_constraints(self, constraints: ConstraintSet) -> "LfrPlant":
        return replace(self, constraints=constraints)

    def select_channel(self, inputs: Optional[Sequence[int]] = None,
                       outputs: Optional[Sequence[int]] = None) -> "LfrPlant":
        """保留指定性能輸入/輸出（控制與量測通道保留在尾部）"""
        inputs = list(range(self.n_perf_inputs)) if inputs is None else list(inputs)
        outputs = list(range(self.n_perf_outputs)) if outputs is None else list(outputs)
        if any(i < 0 or i >= self.n_perf_inputs for i in inputs):
            raise DimensionMismatchError(f"輸入索引超出範圍: {inputs}")
        if any(o < 0 or o >= self.n_perf_outputs for o in outputs):
            raise DimensionMismatchError(f"輸出索引超出範圍: {outputs}")
        cols = inputs + list(range(self.n_perf_inputs, self.n_inputs))
        rows = outputs + list(range(self.n_perf_outputs, self.n_outputs))
        return replace(
            self,
            B2=self.B2[:, cols], D12=self.D12[:, cols],
            C2=self.C2[rows, :], D21=self.D21[rows, :],
            D22=self.D22[np.ix_(rows, cols)],
        )

    def without_control_channels(self) -> "LfrPlant":
        """去掉控制輸入與量測輸出（開環分析）"""
        nw, nz = self.n_perf_inputs, self.n_perf_outputs
        return replace(
            self,
            B2=self.B2[:, :nw], D12=self.D12[:, :nw],
            C2=self.C2[:nz, :], D21=self.D21[:nz, :],
            D22=self.D22[:nz, :nw], n_controls=0, n_measurements=0,
        )

    def check_h2_assumptions(self):
        """性能通道須滿足 D22 = 0，且 D12 = 0 或 D21 = 0"""
        nw, nz = self.n_perf_inputs, self.n_perf_outputs
        D22 = self.D22[:nz, :nw]
        D12 = self.D12[:, :nw]
        D21 = self.D21[:nz, :]
        if np.any(D22 != 0.0):
            raise H2AssumptionError("H2 查詢要求 D22 = 0")
        if np.any(D12 != 0.0) and np.any(D21 != 0.0):
            raise H2AssumptionError("H2 查詢要求 D12 = 0 或 D21 = 0")


def close_loop(plant: LfrPlant, delta: ArrayLike) -> ClosedLoop:
    """在 δ 處閉合 p = Δ q；不適定時返回 well_posed=False"""
    delta = plant.validate_delta(delta)
    delta_matrix = expand_delta(delta, plant.blocks)
    try:
        td = tilde_delta(delta_matrix, plant.D11)
    except IllPosedLftError as e:
        logger.debug(f"LFT 在 δ={np.round(delta, 6).tolist()} 處不適定: {e}")
        return ClosedLoop(None, None, None, None, None, delta_matrix, False, e.rcond)

    A = plant.A1 + plant.B1 @ td @ plant.C1
    B = plant.B2 + plant.B1 @ td @ plant.D12
    C = plant.C2 + plant.D21 @ td @ plant.C1
    D = plant.D22 + plant.D21 @ td @ plant.D12
    return ClosedLoop(A, B, C, D, td, delta_matrix, True)


def eval_constraints(plant: LfrPlant, delta: ArrayLike) -> Tuple[np.ndarray, bool]:
    delta = plant.validate_delta(delta)
    values = plant.constraints.values(delta)
    feasible = values.size == 0 or bool(np.max(values) <= 0.0)
    return values, feasible


def transfer_blocks(plant: LfrPlant, s: complex) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """M(s) 的四個子塊；s = ∞ 時只剩直通項"""
    D = (plant.D11, plant.D12, plant.D21, plant.D22)
    if np.isinf(s) or plant.n_states == 0:
        return tuple(m.astype(complex) for m in D)
    n, n_p = plant.n_states, plant.blocks.total_size
    resolvent = np.linalg.solve(s * np.eye(n) - plant.A1, np.hstack([plant.B1, plant.B2]))
    X1, X2 = resolvent[:, :n_p], resolvent[:, n_p:]
    return (plant.C1 @ X1 + plant.D11, plant.C1 @ X2 + plant.D12,
            plant.C2 @ X1 + plant.D21, plant.C2 @ X2 + plant.D22)


def close_controller(plant: LfrPlant, controller: StateSpace) -> LfrPlant:
    """
    以 u = K(s) y 閉合控制通道，狀態為 [x; x_K]

    Raises:
        DimensionMismatchError: 控制器維度與通道不符，或植物 u→y 直通非零
    """
    nu, ny = plant.n_controls, plant.n_measurements
    Ak, Bk, Ck, Dk = (np.asarray(m, dtype=float) for m in controller)
    nk = Ak.shape[0]
    if Dk.shape != (nu, ny) or Bk.shape != (nk, ny) or Ck.shape != (nu, nk):
        raise DimensionMismatchError(
            f"控制器維度 D{Dk.shape} 與植物通道 (u={nu}, y={ny}) 不符")

    nw, nz = plant.n_perf_inputs, plant.n_perf_outputs
    B2w, B2u = plant.B2[:, :nw], plant.B2[:, nw:]
    D12w, D12u = plant.D12[:, :nw], plant.D12[:, nw:]
    C2z, C2y = plant.C2[:nz], plant.C2[nz:]
    D21z, D21y = plant.D21[:nz], plant.D21[nz:]
    D22zw, D22zu = plant.D22[:nz, :nw], plant.D22[:nz, nw:]
    D22yw, D22yu = plant.D22[nz:, :nw], plant.D22[nz:, nw:]
    if np.any(D22yu != 0.0):
        raise DimensionMismatchError("植物 u→y 直通必須為零")

    A = np.block([[plant.A1 + B2u @ Dk @ C2y, B2u @ Ck],
                  [Bk @ C2y, Ak]])
    B1 = np.vstack([plant.B1 + B2u @ Dk @ D21y, Bk @ D21y])
    B2 = np.vstack([B2w + B2u @ Dk @ D22yw, Bk @ D22yw])
    C1 = np.hstack([plant.C1 + D12u @ Dk @ C2y, D12u @ Ck])
    D11 = plant.D11 + D12u @ Dk @ D21y
    D12 = D12w + D12u @ Dk @ D22yw
    C2 = np.hstack([C2z + D22zu @ Dk @ C2y, D22zu @ Ck])
    D21 = D21z + D22zu @ Dk @ D21y
    D22 = D22zw + D22zu @ Dk @ D22yw
    return LfrPlant(A, B1, B2, C1, C2, D11, D12, D21, D22, plant.blocks,
                    plant.constraints, f"{plant.name}+K", 0, 0)


# ---------------------------------------------------------------------------
# 模型文件
# ---------------------------------------------------------------------------

def _shaped(rows: List[List[float]], n_rows: int, n_cols: int, key: str) -> np.ndarray:
    arr = np.array(rows, dtype=float)
    if arr.size == 0:
        return np.zeros((n_rows, n_cols))
    if arr.shape != (n_rows, n_cols):
        raise ModelFileError(f"{key} 形狀 {arr.shape}，期望 {(n_rows, n_cols)}")
    return arr


def _first_width(*candidates: List[List[float]]) -> Optional[int]:
    for rows in candidates:
        if len(rows) > 0 and len(rows[0]) > 0:
            return len(rows[0])
    return None


def _constraint_from_model(entry: ConstraintModel, k: int) -> List[Constraint]:
    try:
        if entry.type == "builtin":
            kind = entry.parameters.get("name")
            if kind == "ball":
                p = BallParameters(**entry.parameters)
                constraint = ball_constraint(p.radius, p.center, entry.name or "ball")
            elif kind == "halfspace":
                p = HalfspaceParameters(**entry.parameters)
                constraint = halfspace_constraint(p.normal, p.offset, entry.name or "halfspace")
            else:
                raise ModelFileError(f"未知的內建約束: {kind}")
        elif entry.type == "polynomial":
            p = PolynomialParameters(**entry.parameters)
            if any(len(t.powers) != k for t in p.terms):
                raise ModelFileError("多項式約束的冪次長度必須等於參數個數")
            constraint = polynomial_constraint([(t.coefficient, t.powers) for t in p.terms],
                                               p.constant, entry.name or "polynomial")
        else:
            p = ResidualMassParameters(**entry.parameters)
            if len(p.M_terms) != k:
                raise ModelFileError("殘餘質量約束的參數項數必須等於參數個數")
            constraint = AffineResidualMass(np.array(p.M0), tuple(np.array(m) for m in p.M_terms),
                                            np.array(p.L0), tuple(np.array(m) for m in p.L_terms)
                                            ).as_constraint(entry.name or "residual_mass")
    except ValidationError as e:
        raise ModelFileError(f"約束參數無效: {e}") from e

    if entry.equality:
        return list(equality_pair(constraint))
    return [constraint]


def plant_from_model(model: ModelFile) -> LfrPlant:
    """由已驗證的模型文件構造植物"""
    blocks = BlockStructure(tuple((b.name, b.repetitions) for b in model.blocks))
    n, n_p = len(model.A1), blocks.total_size
    n_w = _first_width(model.B2, model.D12, model.D22)
    n_z = len(model.C2) or len(model.D21) or len(model.D22)
    if n_w is None:
        raise ModelFileError("無法推斷輸入維度 (B2/D12/D22 均為空)")

    matrices = {
        "A1": _shaped(model.A1, n, n, "A1"), "B1": _shaped(model.B1, n, n_p, "B1"),
        "B2": _shaped(model.B2, n, n_w, "B2"), "C1": _shaped(model.C1, n_p, n, "C1"),
        "C2": _shaped(model.C2, n_z, n, "C2"), "D11": _shaped(model.D11, n_p, n_p, "D11"),
        "D12": _shaped(model.D12, n_p, n_w, "D12"), "D21": _shaped(model.D21, n_z, n_p, "D21"),
        "D22": _shaped(model.D22, n_z, n_w, "D22"),
    }
    constraints: List[Constraint] = []
    for entry in model.constraints:
        constraints.extend(_constraint_from_model(entry, blocks.k))
    try:
        return LfrPlant(**matrices, blocks=blocks, constraints=ConstraintSet(tuple(constraints)),
                        name=model.name, n_controls=model.n_controls, n_measurements=model.n_measurements)
    except DimensionMismatchError as e:
        raise ModelFileError(str(e)) from e


def plant_to_model(plant: LfrPlant) -> ModelFile:
    entries = []
    for constraint in plant.constraints:
        if constraint.spec is not None and constraint.spec.get("mirror"):
            continue
        if constraint.spec is None:
            raise ModelFileError(f"約束 {constraint.name} 沒有可序列化的描述")
        entries.append(ConstraintModel(name=constraint.name, **constraint.spec))
    return ModelFile(
        name=plant.name,
        A1=plant.A1.tolist(), B1=plant.B1.tolist(), B2=plant.B2.tolist(),
        C1=plant.C1.tolist(), C2=plant.C2.tolist(), D11=plant.D11.tolist(),
        D12=plant.D12.tolist(), D21=plant.D21.tolist(), D22=plant.D22.tolist(),
        blocks=[BlockEntryModel(name=name, repetitions=reps) for name, reps in plant.blocks.entries],
        constraints=entries,
        n_controls=plant.n_controls, n_measurements=plant.n_measurements,
    )


def load_model_file(path: Union[str, Path]) -> LfrPlant:
    """
    讀取模型文件

    Raises:
        ModelFileError: 文件不存在、JSON 無效、含未知鍵或維度不一致
    """
    path = Path(path)
    if not path.is_file():
        raise ModelFileError(f"模型文件不存在: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        model = ModelFile(**raw)
    except (json.JSONDecodeError, TypeError) as e:
        raise ModelFileError(f"模型文件格式錯誤: {e}") from e
    except ValidationError as e:
        raise ModelFileError(f"模型文件驗證失敗: {e}") from e
    plant = plant_from_model(model)
    logger.info(f"已載入模型 {plant.name}: n={plant.n_states}, k={plant.k}, 約束 {len(plant.constraints)} 個")
    return plant


def dump_model_file(plant: LfrPlant, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plant_to_model(plant).model_dump(exclude_none=True), indent=2), encoding="utf-8")
