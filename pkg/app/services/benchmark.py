"""
桌面規模的不確定柔性結構基準模型

單軸中心體 + 若干懸臂附件（每個附件一個固支-自由模態），二階執行器延遲。
廣義坐標 q = [θ, η_1, ..., η_m]，質量矩陣 [[J_t, lᵀ], [l, I]]。
不確定參數以 U δ Vᵀ 形式進入剛度、阻尼與質量矩陣，
殘餘質量 M_r(δ) = diag(J_i) - diag(l_i)² ⪰ 0 界定物理可行域。
"""

import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, ValidationError, model_validator

from app.core.config import settings
from app.core.exceptions import ModelFileError
from app.models.schemas import SynthesisFile
from app.services.uncertain_model import (
    AffineResidualMass,
    BlockStructure,
    ConstraintSet,
    LfrPlant,
    StateSpace,
)

DATA_DIR = Path(__file__).resolve().parent.parent / "data" / "benchmarks"


class UncertaintyDeclaration(BaseModel):
    """
    frequency: 固支-自由頻率 ω(1 ± r)，剛度按 ω² 仿射
    participation: 參與因子 l(1 + rδ)
    inertia: 附件慣量 J(1 + rδ)
    damping: 模態阻尼 d(1 + rδ)
    """

    name: str
    kind: Literal["frequency", "participation", "inertia", "damping"]
    panel: int = Field(ge=0)
    range: float = Field(gt=0, lt=1)


class FlexiblePlantSpec(BaseModel):
    name: str = "default"
    hub_inertia: float = Field(50.0, gt=0)
    panel_inertias: List[float] = Field(default_factory=lambda: [100.0, 100.0])
    frequencies: List[float] = Field(default_factory=lambda: [0.2, 0.3])
    damping: List[float] = Field(default_factory=lambda: [0.005, 0.005])
    participation_ratio: float = Field(1.03, gt=1)
    actuator_tau: float = Field(0.1, gt=0)
    uncertainties: List[UncertaintyDeclaration] = Field(default_factory=list)
    baseline_kp: float = Field(864.0, gt=0)
    baseline_kd: float = Field(864.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        m = len(self.panel_inertias)
        if m == 0 or len(self.frequencies) != m or len(self.damping) != m:
            raise ValueError("附件慣量、頻率與阻尼的數量必須一致且非零")
        if any(w <= 0 for w in self.frequencies) or any(j <= 0 for j in self.panel_inertias):
            raise ValueError("頻率與慣量必須為正")
        if any(z < 0 for z in self.damping):
            raise ValueError("阻尼比不能為負")
        if any(u.panel >= m for u in self.uncertainties):
            raise ValueError("不確定性聲明引用了不存在的附件")
        return self

    @property
    def n_panels(self) -> int:
        return len(self.panel_inertias)

    @property
    def participation(self) -> np.ndarray:
        """名義參與因子 l_i = sqrt(J_i / ratio)，名義殘餘質量為正"""
        return np.sqrt(np.asarray(self.panel_inertias) / self.participation_ratio)


def _repetitions(kind: str) -> int:
    return 2 if kind == "participation" else 1


def _uncertainty_terms(spec: FlexiblePlantSpec):
    """
    每個參數的力列 U 與輸出選擇 (類型, 坐標)

    Returns:
        (U, rows, stiffness_scale)：rows 元素為 ("pos" | "vel" | "acc", 坐標索引)
    """
    N = spec.n_panels + 1
    l0 = spec.participation
    omega = np.asarray(spec.frequencies)
    d0 = 2.0 * np.asarray(spec.damping) * omega
    columns, rows = [], []
    stiffness_scale = np.ones(spec.n_panels)
    for u in spec.uncertainties:
        i, r = u.panel, u.range
        e_hub, e_mode = np.eye(N)[0], np.eye(N)[i + 1]
        if u.kind == "frequency":
            # ω²(1 ± r)² 的中心 1 + r²，半寬 2r
            stiffness_scale[i] = 1.0 + r ** 2
            columns.append(2.0 * r * omega[i] ** 2 * e_mode)
            rows.append(("pos", i + 1))
        elif u.kind == "participation":
            columns += [r * l0[i] * e_hub, r * l0[i] * e_mode]
            rows += [("acc", i + 1), ("acc", 0)]
        elif u.kind == "inertia":
            columns.append(r * spec.panel_inertias[i] * e_hub)
            rows.append(("acc", 0))
        else:
            columns.append(r * d0[i] * e_mode)
            rows.append(("vel", i + 1))
    U = np.column_stack(columns) if columns else np.zeros((N, 0))
    return U, rows, stiffness_scale


def residual_mass_model(spec: FlexiblePlantSpec) -> AffineResidualMass:
    m, k = spec.n_panels, len(spec.uncertainties)
    l0 = spec.participation
    M_terms = [np.zeros((m, m)) for _ in range(k)]
    L_terms = [np.zeros((m, m)) for _ in range(k)]
    for j, u in enumerate(spec.uncertainties):
        if u.kind == "inertia":
            M_terms[j][u.panel, u.panel] = u.range * spec.panel_inertias[u.panel]
        elif u.kind == "participation":
            L_terms[j][u.panel, u.panel] = u.range * l0[u.panel]
    return AffineResidualMass(np.diag(spec.panel_inertias), tuple(M_terms), np.diag(l0), tuple(L_terms))


def residual_mass(spec: FlexiblePlantSpec, delta: np.ndarray) -> np.ndarray:
    """M_r(δ) = M_P(δ) - L_P(δ)ᵀ L_P(δ)"""
    return residual_mass_model(spec).residual(np.asarray(delta, dtype=float))


def build_benchmark(spec: FlexiblePlantSpec) -> LfrPlant:
    """
    構造 LFR 植物

    狀態 [q, q̇, x_a1, x_a2]；輸入 [w_d（中心體擾動力矩）, n（角度量測噪聲）, u]；
    輸出 [θ, u, θ + n, θ̇]，最後一個輸入為控制，最後兩個輸出為量測。
    """
    m = spec.n_panels
    N = m + 1
    n = 2 * N + 2
    l0 = spec.participation
    omega = np.asarray(spec.frequencies)
    tau = spec.actuator_tau
    U, rows, stiffness_scale = _uncertainty_terms(spec)
    n_p = U.shape[1]

    M0 = np.eye(N)
    M0[0, 0] = spec.hub_inertia + sum(spec.panel_inertias)
    M0[0, 1:] = l0
    M0[1:, 0] = l0
    K0 = np.diag(np.r_[0.0, stiffness_scale * omega ** 2])
    D0 = np.diag(np.r_[0.0, 2.0 * np.asarray(spec.damping) * omega])
    Minv = np.linalg.inv(M0)
    torque = np.zeros((N, 1))
    torque[0, 0] = 1.0

    # q̈ = M0⁻¹(e1(x_a2 + w_d) - K0 q - D0 q̇ - U p)
    acc_state = Minv @ np.hstack([-K0, -D0, np.zeros((N, 1)), torque])
    acc_p = -Minv @ U
    acc_w = (Minv @ torque)[:, 0]

    A1 = np.zeros((n, n))
    A1[:N, N:2 * N] = np.eye(N)
    A1[N:2 * N, :] = acc_state
    A1[2 * N, 2 * N] = -1.0 / tau
    A1[2 * N + 1, 2 * N] = 1.0 / tau
    A1[2 * N + 1, 2 * N + 1] = -1.0 / tau

    B1 = np.zeros((n, n_p))
    B1[N:2 * N, :] = acc_p
    B2 = np.zeros((n, 3))
    B2[N:2 * N, 0] = acc_w
    B2[2 * N, 2] = 1.0 / tau

    C1 = np.zeros((n_p, n))
    D11 = np.zeros((n_p, n_p))
    D12 = np.zeros((n_p, 3))
    for j, (kind, coord) in enumerate(rows):
        if kind == "pos":
            C1[j, coord] = 1.0
        elif kind == "vel":
            C1[j, N + coord] = 1.0
        else:
            C1[j] = acc_state[coord]
            D11[j] = acc_p[coord]
            D12[j, 0] = acc_w[coord]

    C2 = np.zeros((4, n))
    C2[0, 0] = 1.0
    C2[2, 0] = 1.0
    C2[3, N] = 1.0
    D21 = np.zeros((4, n_p))
    D22 = np.zeros((4, 3))
    D22[1, 2] = 1.0
    D22[2, 1] = 1.0

    blocks = BlockStructure(tuple((u.name, _repetitions(u.kind)) for u in spec.uncertainties))
    constraints = ConstraintSet((residual_mass_model(spec).as_constraint(),))
    plant = LfrPlant(A1, B1, B2, C1, C2, D11, D12, D21, D22, blocks, constraints,
                     name=spec.name, n_controls=1, n_measurements=2)
    nominal_violation = constraints.max_violation(plant.nominal_delta())
    if nominal_violation > 0.0:
        raise ModelFileError(f"名義殘餘質量非正定 (違反量 {nominal_violation:.3e})")
    logger.debug(f"基準模型 {spec.name}: n={n}, k={plant.k}, Δ 維度 {n_p}")
    return plant


def baseline_controller(spec: FlexiblePlantSpec) -> StateSpace:
    """靜態角度/角速率反饋 u = -kp(θ + n) - kd θ̇"""
    return StateSpace.static([[-spec.baseline_kp, -spec.baseline_kd]])


def _data_dir() -> Path:
    return Path(settings.BENCHMARK_DIR) if settings.BENCHMARK_DIR else DATA_DIR


def available_benchmarks() -> List[str]:
    return sorted(p.stem for p in _data_dir().glob("*.json") if not p.stem.startswith("synthesis_"))


def load_benchmark_spec(name: str) -> FlexiblePlantSpec:
    path = _data_dir() / f"{name}.json"
    if name.startswith("synthesis_") or not path.is_file():
        raise ModelFileError(f"未知的基準模型: {name}（可用: {', '.join(available_benchmarks())}）")
    try:
        return FlexiblePlantSpec(**json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise ModelFileError(f"基準模型配置無效 {path}: {e}") from e


def load_benchmark(name: str) -> Tuple[LfrPlant, FlexiblePlantSpec]:
    spec = load_benchmark_spec(name)
    return build_benchmark(spec), spec


def default_synthesis_config(name: str = "default") -> SynthesisFile:
    path = _data_dir() / f"synthesis_{name}.json"
    if not path.is_file():
        raise ModelFileError(f"找不到綜合配置: {path}")
    try:
        return SynthesisFile(**json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise ModelFileError(f"綜合配置無效 {path}: {e}") from e


def parse_model_argument(argument: str) -> Tuple[str, Optional[str]]:
    """'benchmark:<name>' 返回 ("benchmark", name)，否則 ("file", path)"""
    if argument.startswith("benchmark:"):
        return "benchmark", argument.split(":", 1)[1] or "default"
    return "file", argument
