"""
系統分析：譜橫坐標、H∞ 範數（含活躍頻率與奇異向量）、平方 H2 範數
"""

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from loguru import logger
from scipy.optimize import minimize_scalar

from app.core.config import settings
from app.core.exceptions import (
    EigenSolverError,
    LyapunovSolveError,
    NoConvergenceError,
    NonzeroFeedthroughError,
    UnstableSystemError,
)
from app.services.uncertain_model import StateSpace

INFINITE_FREQUENCY = float("inf")


@dataclass(frozen=True)
class ActiveEigenvalue:
    value: complex
    right: np.ndarray
    left: np.ndarray
    simple: bool
    paired: bool


@dataclass(frozen=True)
class AbscissaResult:
    value: float
    active_eigs: Tuple[ActiveEigenvalue, ...]
    tolerance: float


@dataclass(frozen=True)
class ActiveFrequency:
    omega: float
    sigma: float
    left: np.ndarray
    right: np.ndarray
    multiplicity: int


@dataclass(frozen=True)
class HinfResult:
    value: float
    active_freqs: Tuple[ActiveFrequency, ...]
    method: str
    lower: float
    upper: float


@dataclass(frozen=True)
class H2Result:
    value_sq: float
    X: np.ndarray
    Y: np.ndarray
    residual: float = 0.0


def spectral_abscissa(A: np.ndarray, active_tol: Optional[float] = None) -> AbscissaResult:
    """
    α(A) = max Re λ(A)；活躍集為 Re λ ≥ α - active_tol 的特徵值

    共軛對只報告 Im ≥ 0 的一個，並標記 paired。
    """
    tol = settings.ACTIVE_EIG_TOL if active_tol is None else active_tol
    A = np.asarray(A, dtype=float)
    if A.shape[0] == 0:
        return AbscissaResult(-np.inf, (), tol)
    try:
        w, vl, vr = scipy.linalg.eig(A, left=True, right=True)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise EigenSolverError(f"特徵值求解失敗: {e}") from e
    if not np.all(np.isfinite(w)):
        raise EigenSolverError("特徵值包含非有限值")

    value = float(np.max(w.real))
    scale = max(1.0, float(np.max(np.abs(w))))
    active = []
    for i in np.nonzero(w.real >= value - tol)[0]:
        lam = w[i]
        paired = abs(lam.imag) > tol
        if lam.imag < -tol:
            continue
        v = vr[:, i] / np.linalg.norm(vr[:, i])
        u = vl[:, i]
        uv = np.vdot(u, v)
        others = np.delete(w, i)
        isolated = others.size == 0 or np.min(np.abs(others - lam)) > 1e-6 * scale
        simple = bool(isolated and abs(uv) > 1e-10 * np.linalg.norm(u))
        if abs(uv) > 0:
            u = u / np.conj(uv)
        active.append(ActiveEigenvalue(complex(lam), v, u, simple, bool(paired)))

    active.sort(key=lambda e: (-e.value.real, abs(e.value.imag)))
    return AbscissaResult(value, tuple(active), tol)


def frequency_response(ss: StateSpace, omega: float) -> np.ndarray:
    """T(jω)；ω = ∞ 時返回 D"""
    A, B, C, D = ss
    if np.isinf(omega) or A.shape[0] == 0:
        return D.astype(complex)
    n = A.shape[0]
    return C @ np.linalg.solve(1j * omega * np.eye(n) - A, B) + D


def _sigma_max(ss: StateSpace, omega: float) -> float:
    return float(np.linalg.norm(frequency_response(ss, omega), 2))


def _hamiltonian_crossings(ss: StateSpace, gamma: float) -> np.ndarray:
    """σ̄(T(jω)) = γ 的頻率（Hamiltonian 純虛特徵值的虛部，非負且排序）"""
    A, B, C, D = ss
    m, p = B.shape[1], C.shape[0]
    R = D.T @ D - gamma ** 2 * np.eye(m)
    S = D @ D.T - gamma ** 2 * np.eye(p)
    Rinv_Dt = np.linalg.solve(R, D.T)
    Rinv_Bt = np.linalg.solve(R, B.T)
    H = np.block([
        [A - B @ Rinv_Dt @ C, -gamma * B @ Rinv_Bt],
        [gamma * C.T @ np.linalg.solve(S, C), -A.T + C.T @ D @ Rinv_Bt],
    ])
    eigs = np.linalg.eigvals(H)
    imag_tol = settings.HAMILTONIAN_IMAG_TOL
    on_axis = eigs[np.abs(eigs.real) <= imag_tol * (1.0 + np.abs(eigs.imag))]
    return np.unique(np.round(np.abs(on_axis.imag), 14))


def _interval_midpoints(crossings: np.ndarray) -> List[float]:
    points = np.concatenate([[0.0], crossings]) if crossings.size and crossings[0] > 0 else crossings
    return [0.5 * (a + b) for a, b in zip(points[:-1], points[1:])]


def _refine_peak(ss: StateSpace, lo: float, hi: float) -> Tuple[float, float]:
    """在 [lo, hi] 內局部最大化 σ̄"""
    if hi <= lo:
        return lo, _sigma_max(ss, lo)
    res = minimize_scalar(lambda w: -_sigma_max(ss, w), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12 * max(1.0, hi)})
    return float(res.x), float(-res.fun)


def _singular_triplet(ss: StateSpace, omega: float) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    U, s, Vh = np.linalg.svd(frequency_response(ss, omega))
    return float(s[0]), U[:, 0], Vh[0].conj(), s


def hinf_norm(ss: StateSpace, rel_tol: Optional[float] = None,
              active_rel_tol: Optional[float] = None,
              max_bisections: Optional[int] = None) -> HinfResult:
    """
    H∞ 範數：γ 二分法 + Hamiltonian 純虛特徵值檢驗

    Args:
        ss: 穩定的狀態空間系統
        rel_tol: 相對精度
        active_rel_tol: 活躍頻率容差（相對於範數值）
        max_bisections: 二分步數上限

    Returns:
        HinfResult，活躍頻率包含 ω=0 與 ω=∞ 候選
    """
    rel_tol = settings.HINF_REL_TOL if rel_tol is None else rel_tol
    active_rel_tol = settings.ACTIVE_FREQ_REL_TOL if active_rel_tol is None else active_rel_tol
    max_bisections = settings.HINF_MAX_BISECTIONS if max_bisections is None else max_bisections
    ss = StateSpace(*(np.asarray(m, dtype=float) for m in ss))
    A, B, C, D = ss

    d_norm = float(np.linalg.norm(D, 2)) if D.size else 0.0
    if A.shape[0] == 0:
        return _collect_active(ss, d_norm, [INFINITE_FREQUENCY], active_rel_tol, "static", d_norm, d_norm)

    alpha = float(np.max(np.linalg.eigvals(A).real))
    if alpha >= 0.0:
        raise UnstableSystemError(alpha)

    # 下界：σ̄(D)、ω=0 與對數均勻採樣頻率
    eig_mag = np.abs(np.linalg.eigvals(A))
    w_lo = max(float(np.min(eig_mag)), 1e-6) / 10.0
    w_hi = max(float(np.max(eig_mag)), 1e-6) * 10.0
    samples = [0.0] + list(np.logspace(np.log10(w_lo), np.log10(w_hi), settings.HINF_SEED_FREQUENCIES))
    candidates = [INFINITE_FREQUENCY] + samples
    values = [d_norm] + [_sigma_max(ss, w) for w in samples]
    best = int(np.argmax(values))
    lo, lo_freq = values[best], candidates[best]
    if lo <= 0.0:
        return _collect_active(ss, 0.0, candidates, active_rel_tol, "bisection", 0.0, 0.0)

    def raise_lower(gamma, crossings):
        nonlocal lo, lo_freq
        for w in _interval_midpoints(crossings):
            s = _sigma_max(ss, w)
            candidates.append(w)
            if s > lo:
                lo, lo_freq = s, w

    # 上界：倍增直到無穿越
    hi = 2.0 * lo
    for _ in range(60):
        crossings = _hamiltonian_crossings(ss, hi)
        if crossings.size == 0:
            break
        raise_lower(hi, crossings)
        hi = 2.0 * max(hi, lo)
    else:
        raise NoConvergenceError("H∞ 上界倍增未收斂")

    for _ in range(max_bisections):
        if hi - lo <= rel_tol * lo:
            break
        gamma = 0.5 * (lo + hi)
        crossings = _hamiltonian_crossings(ss, gamma)
        if crossings.size:
            lo = max(lo, gamma)
            raise_lower(gamma, crossings)
        else:
            hi = gamma
    else:
        raise NoConvergenceError(f"H∞ 二分法在 {max_bisections} 步內未收斂 (lo={lo:.6g}, hi={hi:.6g})")

    # 峰值細化：略低於峰值的穿越區間內局部最大化
    refined = [lo_freq] + candidates
    gamma_test = lo * (1.0 - 10.0 * rel_tol)
    if gamma_test > d_norm:
        crossings = _hamiltonian_crossings(ss, gamma_test)
        points = np.concatenate([[0.0], crossings]) if crossings.size and crossings[0] > 0 else crossings
        for a, b in zip(points[:-1], points[1:]):
            w_mid = 0.5 * (a + b)
            if _sigma_max(ss, w_mid) >= gamma_test:
                w_peak, s_peak = _refine_peak(ss, float(a), float(b))
                refined.append(w_peak)
                if s_peak > lo:
                    lo, lo_freq = s_peak, w_peak
    elif np.isfinite(lo_freq) and lo_freq > 0:
        w_peak, s_peak = _refine_peak(ss, lo_freq / 1.5, lo_freq * 1.5)
        refined.append(w_peak)
        lo = max(lo, s_peak)

    value = max(lo, max(_sigma_max(ss, w) for w in refined))
    return _collect_active(ss, value, refined, active_rel_tol, "bisection", lo, max(hi, value))


def _collect_active(ss: StateSpace, value: float, freqs: Sequence[float], active_rel_tol: float,
                    method: str, lower: float, upper: float) -> HinfResult:
    tol = value * active_rel_tol
    active: List[ActiveFrequency] = []
    seen: List[float] = []
    for w in sorted(set(float(f) for f in freqs)):
        if ss.D.size == 0 and np.isinf(w):
            continue
        if any(np.isclose(w, s, rtol=1e-6, atol=1e-12) or (np.isinf(w) and np.isinf(s)) for s in seen):
            continue
        sigma, q, p, s = _singular_triplet(ss, w)
        if sigma >= value - tol:
            multiplicity = int(np.sum(s >= sigma - max(tol, 1e-12 * max(sigma, 1.0))))
            active.append(ActiveFrequency(w, sigma, q, p, multiplicity))
            seen.append(w)
    if not active and ss.D.size:
        sigma, q, p, s = _singular_triplet(ss, INFINITE_FREQUENCY)
        active.append(ActiveFrequency(INFINITE_FREQUENCY, sigma, q, p, 1))
    return HinfResult(float(value), tuple(active), method, float(lower), float(upper))


def lyapunov_residual(A: np.ndarray, Q: np.ndarray, X: np.ndarray) -> float:
    """‖AᵀX + XA + Q‖ / (max(1, ‖Q‖)·max(1, ‖A‖‖X‖))"""
    residual = np.linalg.norm(A.T @ X + X @ A + Q)
    scale = max(1.0, np.linalg.norm(Q)) * max(1.0, np.linalg.norm(A) * np.linalg.norm(X))
    return float(residual / scale)


def solve_lyapunov(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """
    解 AᵀX + XA + Q = 0

    n ≤ LYAPUNOV_KRONECKER_MAX 時用 Kronecker 向量化直接求解，否則用 Bartels-Stewart。
    相對殘差超過 LYAPUNOV_RESIDUAL_WARN 記警告，超過 LYAPUNOV_RESIDUAL_FAIL 拋錯。

    Raises:
        LyapunovSolveError: 方程奇異、病態（A 有接近虛軸的特徵值對）或解的殘差過大
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0))

    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            if n <= settings.LYAPUNOV_KRONECKER_MAX:
                eye = np.eye(n)
                K = np.kron(eye, A.T) + np.kron(A.T, eye)
                x = scipy.linalg.solve(K, -Q.reshape(-1, order="F"))
                X = x.reshape(n, n, order="F")
            else:
                X = scipy.linalg.solve_continuous_lyapunov(A.T, -Q)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError) as e:
            raise LyapunovSolveError(f"Lyapunov 方程求解失敗: {e}") from e

    X = 0.5 * (X + X.T)
    residual = lyapunov_residual(A, Q, X)
    if not residual <= settings.LYAPUNOV_RESIDUAL_FAIL:
        raise LyapunovSolveError(f"Lyapunov 解的相對殘差 {residual:.3e} 超過 {settings.LYAPUNOV_RESIDUAL_FAIL:.1e}")
    if residual > settings.LYAPUNOV_RESIDUAL_WARN:
        logger.warning(f"Lyapunov 殘差偏大: {residual:.3e}")
    return X


def h2_norm_sq(ss: StateSpace) -> H2Result:
    """
    平方 H2 範數 Tr(BᵀXB) = Tr(CYCᵀ)

    Raises:
        UnstableSystemError: A 非 Hurwitz
        NonzeroFeedthroughError: D ≠ 0
    """
    A, B, C, D = (np.asarray(m, dtype=float) for m in ss)
    if D.size and np.any(np.abs(D) > 0.0):
        raise NonzeroFeedthroughError("H2 範數要求 D = 0")
    if A.shape[0] == 0:
        return H2Result(0.0, np.zeros((0, 0)), np.zeros((0, 0)))
    alpha = float(np.max(np.linalg.eigvals(A).real))
    if alpha >= 0.0:
        raise UnstableSystemError(alpha)

    Q_x, Q_y = C.T @ C, B @ B.T
    X = solve_lyapunov(A, Q_x)
    Y = solve_lyapunov(A.T, Q_y)
    residual = max(lyapunov_residual(A, Q_x, X), lyapunov_residual(A.T, Q_y, Y))
    via_x = float(np.trace(B.T @ X @ B))
    via_y = float(np.trace(C @ Y @ C.T))
    if abs(via_x - via_y) > 1e-8 * max(abs(via_x), abs(via_y), 1e-300):
        logger.warning(f"H2 兩種跡公式不一致: {via_x:.12g} vs {via_y:.12g}")
    return H2Result(max(via_x, 0.0), X, Y, residual)
