"""
對 δ 的解析梯度與次梯度

所有量以最小化意義給出：h2 = -‖T‖₂²，h∞ = -‖T‖∞，a = -α。
Δ̃ 對 δ_i 的導數 dΔ̃_i = (I - ΔD11)⁻¹ E_i (I - D11Δ)⁻¹，E_i 為第 i 塊的指示矩陣。
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from app.core.config import settings
from app.core.exceptions import (
    IllPosedLftError,
    NoActiveFrequencyError,
    NonSimpleActiveEigenvalueError,
)
from app.services.system_analysis import AbscissaResult, H2Result, HinfResult, h2_norm_sq
from app.services.uncertain_model import ClosedLoop, LfrPlant, close_loop, transfer_blocks


class SmoothnessCertificate(str, Enum):
    UNIQUE_ACTIVE = "unique_active"
    MULTIPLE_ACTIVE = "multiple_active"


@dataclass(frozen=True)
class SubgradientVector:
    values: np.ndarray
    smooth_certificate: SmoothnessCertificate

    @property
    def is_smooth(self) -> bool:
        return self.smooth_certificate == SmoothnessCertificate.UNIQUE_ACTIVE


def _lft_factors(plant: LfrPlant, closed: ClosedLoop):
    """(I - ΔD11)⁻¹ 與 (I - D11Δ)⁻¹"""
    if not closed.well_posed:
        raise IllPosedLftError("LFT 不適定，無法求導", rcond=closed.rcond)
    n_p = plant.blocks.total_size
    eye = np.eye(n_p)
    left = np.linalg.inv(eye - closed.delta_matrix @ plant.D11)
    right = np.linalg.inv(eye - plant.D11 @ closed.delta_matrix)
    return left, right


def _block_traces(plant: LfrPlant, M: np.ndarray) -> np.ndarray:
    """Σ_{j ∈ 塊 i} M_jj，對每個塊"""
    diag = np.diag(M)
    return np.array([np.sum(diag[plant.blocks.block_slice(i)]) for i in range(plant.k)])


def _closed(plant: LfrPlant, delta: np.ndarray, closed: Optional[ClosedLoop]) -> ClosedLoop:
    return close_loop(plant, delta) if closed is None else closed


def grad_h2(plant: LfrPlant, delta: np.ndarray, closed: Optional[ClosedLoop] = None,
            h2res: Optional[H2Result] = None) -> SubgradientVector:
    """
    h2 = -‖T‖₂² 的梯度

    ∂‖T‖₂²/∂Δ̃ = 2(B1ᵀX + D21ᵀC) Y C1ᵀ + 2 B1ᵀ X B D12ᵀ，再經 dΔ̃_i 鏈式求導。
    """
    delta = plant.validate_delta(delta)
    closed = _closed(plant, delta, closed)
    ss = closed.state_space
    if h2res is None:
        h2res = h2_norm_sq(ss)
    if plant.k == 0:
        return SubgradientVector(np.zeros(0), SmoothnessCertificate.UNIQUE_ACTIVE)

    X, Y = h2res.X, h2res.Y
    G = (2.0 * (plant.B1.T @ X + plant.D21.T @ ss.C) @ Y @ plant.C1.T
         + 2.0 * plant.B1.T @ X @ ss.B @ plant.D12.T)
    left, right = _lft_factors(plant, closed)
    # Tr(Gᵀ L E_i R) = Σ_{j∈i} (R Gᵀ L)_jj
    derivative = _block_traces(plant, right @ G.T @ left)
    return SubgradientVector(-derivative, SmoothnessCertificate.UNIQUE_ACTIVE)


def subgrad_hinf(plant: LfrPlant, delta: np.ndarray, hinfres: HinfResult,
                 closed: Optional[ClosedLoop] = None,
                 frequency_index: Optional[int] = None) -> SubgradientVector:
    """
    h∞ = -‖T‖∞ 的次梯度

    在活躍頻率 ω0 處 dσ̄ = Re qᴴ T_zp dΔ T_qw p，
    T_qw = (I - M11Δ)⁻¹M12，T_zp = M21(I - ΔM11)⁻¹。

    Args:
        frequency_index: 指定活躍分支；默認取 σ̄ 最大者，平手取最低頻率
    """
    delta = plant.validate_delta(delta)
    if not hinfres.active_freqs:
        raise NoActiveFrequencyError("H∞ 結果沒有活躍頻率")
    closed = _closed(plant, delta, closed)
    if not closed.well_posed:
        raise IllPosedLftError("LFT 不適定，無法求導", rcond=closed.rcond)

    if frequency_index is None:
        frequency_index = min(range(len(hinfres.active_freqs)),
                              key=lambda i: (-hinfres.active_freqs[i].sigma, hinfres.active_freqs[i].omega))
    active = hinfres.active_freqs[frequency_index]
    unique = len(hinfres.active_freqs) == 1 and active.multiplicity == 1
    certificate = SmoothnessCertificate.UNIQUE_ACTIVE if unique else SmoothnessCertificate.MULTIPLE_ACTIVE
    if plant.k == 0:
        return SubgradientVector(np.zeros(0), certificate)

    s = active.omega if np.isinf(active.omega) else 1j * active.omega
    M11, M12, M21, _ = transfer_blocks(plant, s)
    D = closed.delta_matrix
    eye = np.eye(D.shape[0])
    T_qw = np.linalg.solve(eye - M11 @ D, M12)
    T_zp = np.linalg.solve((eye - D @ M11).T, M21.T).T
    K = T_qw @ np.outer(active.right, active.left.conj()) @ T_zp
    derivative = _block_traces(plant, K).real
    return SubgradientVector(-derivative, certificate)


def grad_abscissa(plant: LfrPlant, delta: np.ndarray, absres: AbscissaResult,
                  closed: Optional[ClosedLoop] = None) -> SubgradientVector:
    """
    a = -α 的梯度：dλ = uᴴ B1 dΔ̃ C1 v（uᴴv = 1）

    Raises:
        NonSimpleActiveEigenvalueError: 所有活躍特徵值皆為虧損特徵值
    """
    delta = plant.validate_delta(delta)
    simple = [e for e in absres.active_eigs if e.simple]
    if not simple:
        raise NonSimpleActiveEigenvalueError("所有活躍特徵值均非單特徵值")
    eig = simple[0]
    unique = len(absres.active_eigs) == 1
    certificate = SmoothnessCertificate.UNIQUE_ACTIVE if unique else SmoothnessCertificate.MULTIPLE_ACTIVE
    if plant.k == 0:
        return SubgradientVector(np.zeros(0), certificate)

    closed = _closed(plant, delta, closed)
    left, right = _lft_factors(plant, closed)
    K = right @ plant.C1 @ np.outer(eig.right, eig.left.conj()) @ plant.B1 @ left
    derivative = _block_traces(plant, K).real
    return SubgradientVector(-derivative, certificate)


def fd_gradient(f: Callable[[np.ndarray], float], delta: np.ndarray,
                step: Optional[float] = None) -> np.ndarray:
    """逐分量中心差分"""
    step = settings.FD_STEP if step is None else step
    delta = np.asarray(delta, dtype=float)
    g = np.zeros(delta.size)
    for i in range(delta.size):
        e = np.zeros(delta.size)
        e[i] = step
        g[i] = (f(delta + e) - f(delta - e)) / (2.0 * step)
    return g
