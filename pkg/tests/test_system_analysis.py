"""
譜橫坐標、H∞ 與 H2 範數、Lyapunov 方程測試
"""

import numpy as np
import pytest
import scipy.linalg
from scipy.integrate import quad
from scipy.linalg import expm
from scipy.optimize import minimize_scalar

from app.core.config import settings
from app.core.exceptions import LyapunovSolveError, NonzeroFeedthroughError, UnstableSystemError
from app.services.system_analysis import (
    frequency_response,
    h2_norm_sq,
    hinf_norm,
    lyapunov_residual,
    solve_lyapunov,
    spectral_abscissa,
)
from app.services.uncertain_model import StateSpace


def _stable_matrix(rng: np.random.Generator, n: int) -> np.ndarray:
    M = rng.standard_normal((n, n))
    return M - (np.max(np.linalg.eigvals(M).real) + 0.5) * np.eye(n)


def test_spectral_abscissa_diagonal():
    res = spectral_abscissa(np.diag([-1.0, -3.0]))
    assert res.value == pytest.approx(-1.0)
    assert len(res.active_eigs) == 1
    assert res.active_eigs[0].simple


def test_spectral_abscissa_conjugate_pair():
    res = spectral_abscissa(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    assert res.value == pytest.approx(0.0, abs=1e-12)
    # 共軛對只報告上半平面的一個
    assert len(res.active_eigs) == 1
    assert res.active_eigs[0].value.imag == pytest.approx(1.0)
    assert res.active_eigs[0].paired


def test_spectral_abscissa_random():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((8, 8))
    assert spectral_abscissa(A).value == pytest.approx(np.max(np.linalg.eigvals(A).real), rel=1e-12)


def test_spectral_abscissa_eigenvector_normalization():
    """左右特徵向量滿足 uᴴv = 1"""
    rng = np.random.default_rng(1)
    A = rng.standard_normal((5, 5))
    for eig in spectral_abscissa(A).active_eigs:
        assert np.vdot(eig.left, eig.right) == pytest.approx(1.0)
        assert np.allclose(A @ eig.right, eig.value * eig.right, atol=1e-9)


def test_hinf_first_order_lag():
    """1/(s+1) 的峰值在 ω = 0"""
    res = hinf_norm(StateSpace.from_arrays([[-1.0]], [[1.0]], [[1.0]], [[0.0]]))
    assert res.value == pytest.approx(1.0, rel=1e-6)
    assert any(f.omega == pytest.approx(0.0, abs=1e-6) for f in res.active_freqs)


def test_hinf_static_system():
    D = np.array([[3.0, 4.0]])
    res = hinf_norm(StateSpace.static(D))
    assert res.value == pytest.approx(5.0)
    assert np.isinf(res.active_freqs[0].omega)


def test_hinf_resonant_matches_grid():
    """ζ = 0.01 的共振系統與密集頻率網格一致"""
    zeta, wn = 0.01, 1.0
    ss = StateSpace.from_arrays([[0.0, 1.0], [-wn ** 2, -2 * zeta * wn]], [[0.0], [1.0]], [[1.0, 0.0]], [[0.0]])
    res = hinf_norm(ss)
    grid = np.logspace(-2, 2, 100000)
    grid_peak = max(np.abs(frequency_response(ss, w)[0, 0]) for w in grid)
    assert res.value >= grid_peak * (1 - 1e-6)
    assert res.value == pytest.approx(grid_peak, rel=1e-4)
    assert res.lower <= res.value <= res.upper * (1 + 1e-9)


def test_hinf_unstable_raises():
    with pytest.raises(UnstableSystemError):
        hinf_norm(StateSpace.from_arrays([[0.5]], [[1.0]], [[1.0]], [[0.0]]))


@pytest.mark.parametrize("a", [1.0, 4.0])
def test_h2_first_order(a):
    """‖1/(s+a)‖₂² = 1/(2a)"""
    assert h2_norm_sq(StateSpace.from_arrays([[-a]], [[1.0]], [[1.0]], [[0.0]])).value_sq == pytest.approx(1.0 / (2 * a))


def test_h2_matches_impulse_energy():
    rng = np.random.default_rng(7)
    A = _stable_matrix(rng, 6)
    B = rng.standard_normal((6, 2))
    C = rng.standard_normal((1, 6))
    value = h2_norm_sq(StateSpace(A, B, C, np.zeros((1, 2)))).value_sq

    def energy(t):
        g = C @ expm(A * t) @ B
        return float(np.sum(g ** 2))

    decay = -np.max(np.linalg.eigvals(A).real)
    quadrature, _ = quad(energy, 0.0, 60.0 / decay, limit=400, epsabs=1e-13, epsrel=1e-9)
    assert value == pytest.approx(quadrature, rel=1e-6)


def test_h2_requires_zero_feedthrough():
    with pytest.raises(NonzeroFeedthroughError):
        h2_norm_sq(StateSpace.from_arrays([[-1.0]], [[1.0]], [[1.0]], [[0.1]]))


def test_solve_lyapunov_small_cases():
    assert np.allclose(solve_lyapunov(-np.eye(3), 2 * np.eye(3)), np.eye(3))
    assert solve_lyapunov(np.array([[-1.0]]), np.array([[1.0]]))[0, 0] == pytest.approx(0.5)


def test_solve_lyapunov_matches_kronecker():
    """AᵀX + XA + Q = 0 與向量化線性方程一致"""
    rng = np.random.default_rng(11)
    A = _stable_matrix(rng, 5)
    R = rng.standard_normal((5, 5))
    Q = R @ R.T
    X = solve_lyapunov(A, Q)
    n = A.shape[0]
    K = np.kron(np.eye(n), A.T) + np.kron(A.T, np.eye(n))
    X_direct = np.linalg.solve(K, -Q.reshape(-1, order="F")).reshape((n, n), order="F")
    assert np.allclose(X, X_direct, atol=1e-9)
    assert np.linalg.norm(A.T @ X + X @ A + Q) < 1e-8


def test_solve_lyapunov_rejects_inaccurate_solution(monkeypatch):
    """線性求解返回偏離的解時按殘差拋錯，而不是只記警告"""
    exact = scipy.linalg.solve
    monkeypatch.setattr(scipy.linalg, "solve", lambda K, b: exact(K, b) + 1e-3)
    with pytest.raises(LyapunovSolveError):
        solve_lyapunov(-np.eye(3), 2 * np.eye(3))


def test_lyapunov_residual_scaled():
    A, Q = -np.eye(2), 2 * np.eye(2)
    assert lyapunov_residual(A, Q, np.eye(2)) == 0.0
    assert lyapunov_residual(A, Q, 1.5 * np.eye(2)) > settings.LYAPUNOV_RESIDUAL_FAIL


def test_spectral_abscissa_shift():
    """α(A + cI) = α(A) + c"""
    rng = np.random.default_rng(17)
    for _ in range(20):
        n = int(rng.integers(1, 9))
        A = rng.standard_normal((n, n))
        c = float(rng.uniform(-5.0, 5.0))
        shifted = spectral_abscissa(A + c * np.eye(n)).value
        assert shifted == pytest.approx(spectral_abscissa(A).value + c, abs=1e-9 * (1.0 + abs(c)))


def _random_stable_system(rng: np.random.Generator) -> StateSpace:
    n = int(rng.integers(2, 9))
    m, p = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    A = _stable_matrix(rng, n)
    D = rng.standard_normal((p, m)) if rng.random() < 0.5 else np.zeros((p, m))
    return StateSpace(A, rng.standard_normal((n, m)), rng.standard_normal((p, n)), D)


def _grid_sigma(ss: StateSpace, omegas: np.ndarray) -> np.ndarray:
    A, B, C, D = ss
    n = A.shape[0]
    sigmas = []
    for chunk in np.array_split(omegas, max(1, omegas.size // 5000)):
        M = 1j * chunk[:, None, None] * np.eye(n) - A
        T = C @ np.linalg.solve(M, np.broadcast_to(B, (chunk.size,) + B.shape)) + D
        sigmas.append(np.linalg.svd(T, compute_uv=False)[:, 0])
    return np.concatenate(sigmas)


def _grid_peak(ss: StateSpace) -> float:
    """10⁵ 點對數網格（含 ω = 0 與 σ̄(D)），最大點在相鄰網格間再做一維細化"""
    mags = np.abs(np.linalg.eigvals(ss.A))
    omegas = np.r_[0.0, np.logspace(np.log10(mags.min() / 100.0), np.log10(mags.max() * 100.0), 100000)]
    sigmas = _grid_sigma(ss, omegas)
    i = int(np.argmax(sigmas))
    lo, hi = omegas[max(i - 1, 0)], omegas[min(i + 1, omegas.size - 1)]
    sigma = lambda w: float(np.linalg.norm(frequency_response(ss, w), 2))
    polished = -minimize_scalar(lambda w: -sigma(w), bounds=(lo, hi), method="bounded",
                                options={"xatol": 1e-14 * max(1.0, hi)}).fun
    d_norm = float(np.linalg.norm(ss.D, 2))
    return max(float(sigmas[i]), polished, d_norm)


@pytest.mark.slow
def test_hinf_matches_dense_grid_on_random_systems():
    rng = np.random.default_rng(2024)
    rel_tol = settings.HINF_REL_TOL
    for _ in range(50):
        ss = _random_stable_system(rng)
        value = hinf_norm(ss).value
        oracle = _grid_peak(ss)
        assert value >= oracle * (1 - 2 * rel_tol)
        assert value <= oracle * (1 + 2 * rel_tol)


@pytest.mark.slow
def test_h2_matches_impulse_energy_on_random_systems():
    rng = np.random.default_rng(99)
    for _ in range(10):
        ss = _random_stable_system(rng)
        ss = StateSpace(ss.A, ss.B, ss.C, np.zeros_like(ss.D))
        result = h2_norm_sq(ss)
        assert result.residual <= 1e-8

        def energy(t):
            g = ss.C @ expm(ss.A * t) @ ss.B
            return float(np.sum(g ** 2))

        decay = -np.max(np.linalg.eigvals(ss.A).real)
        quadrature, _ = quad(energy, 0.0, 60.0 / decay, limit=800, epsabs=1e-13, epsrel=1e-10)
        assert result.value_sq == pytest.approx(quadrature, rel=1e-6)


def test_h2_reports_lyapunov_residual():
    rng = np.random.default_rng(5)
    for _ in range(20):
        ss = _random_stable_system(rng)
        result = h2_norm_sq(StateSpace(ss.A, ss.B, ss.C, np.zeros_like(ss.D)))
        assert 0.0 <= result.residual <= 1e-8
