"""
粒子群、蒙特卡羅抽樣與樣本數界測試
"""

import numpy as np
import pytest
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import FeasibleDrawTimeout, ObjectiveEvaluationFailure
from app.services.explorers import (
    Box,
    McPlan,
    SwarmConfig,
    mc_sample,
    mc_sample_size,
    particle_streams,
    project_box,
    pso_minimize,
)
from app.services.uncertain_model import ConstraintSet, halfspace_constraint, polynomial_constraint


@pytest.mark.parametrize("gamma,epsilon,expected", [
    (1e-5, 1e-5, 1151287),
    (0.01, 0.01, 459),
    (1.0 - 1e-12, 0.5, 1),
])
def test_mc_sample_size(gamma, epsilon, expected):
    assert mc_sample_size(gamma, epsilon) == expected


@pytest.mark.parametrize("gamma,epsilon", [(0.0, 0.1), (0.1, 1.0), (1.5, 0.1)])
def test_mc_sample_size_rejects_out_of_range(gamma, epsilon):
    with pytest.raises(ValueError):
        mc_sample_size(gamma, epsilon)


def test_mc_plan_derives_size():
    assert McPlan(gamma=0.01, epsilon=0.01).N == 459
    assert McPlan(N=17).N == 17
    with pytest.raises(ValidationError):
        McPlan()


def test_project_box():
    inside = np.array([0.2, -0.9])
    assert np.array_equal(project_box(inside), inside)
    assert project_box(np.array([1.7, -2.0])).tolist() == [1.0, -1.0]
    x = np.array([3.0, 0.1, -7.0])
    assert np.array_equal(project_box(project_box(x)), project_box(x))


def test_swarm_config_rejects_bad_inertia():
    with pytest.raises(ValidationError):
        SwarmConfig(inertia_range=(0.9, 0.5))


@pytest.mark.parametrize("k", [1, 3, 5])
def test_pso_sphere(k):
    """‖δ‖² 的全局最小值 0"""
    result = pso_minimize(lambda d: float(d @ d), ConstraintSet(), Box.unit(k), SwarmConfig(seed=2))
    assert result.feasible
    assert result.best_value <= 1e-3


def test_pso_constrained_boundary_optimum():
    """min δ1 s.t. δ1 ≥ 0.5"""
    constraints = ConstraintSet((halfspace_constraint([-1.0, 0.0], -0.5),))
    result = pso_minimize(lambda d: float(d[0]), constraints, Box.unit(2), SwarmConfig(seed=1))
    assert result.feasible
    assert constraints.is_feasible(result.best_point)
    assert result.best_value == pytest.approx(0.5, abs=2e-2)


def test_pso_objective_limit_exits_early():
    config = SwarmConfig(seed=0, swarm_size=20, objective_limit=10.0)
    result = pso_minimize(lambda d: float(d @ d), ConstraintSet(), Box.unit(2), config)
    assert result.evaluations == 20
    assert len(result.history) == 1


def test_pso_deterministic_for_seed():
    objective = lambda d: float(np.sin(3 * d[0]) + d[1] ** 2)
    first = pso_minimize(objective, ConstraintSet(), Box.unit(2), SwarmConfig(seed=5, workers=3))
    second = pso_minimize(objective, ConstraintSet(), Box.unit(2), SwarmConfig(seed=5, workers=1))
    assert np.array_equal(first.best_point, second.best_point)
    assert first.history == second.history


def test_particle_streams_distinct():
    streams = particle_streams(0, 0, 3)
    draws = [rng.random() for rng in streams]
    assert len(set(draws)) == 3
    assert particle_streams(0, 1, 1)[0].random() != draws[0]


def test_pso_particle_draws_independent_of_swarm_size():
    """粒子 i 的初始位置只由 (種子, i) 決定"""
    def initial_positions(swarm_size):
        seen = []

        def objective(d):
            seen.append(d.copy())
            return float(d @ d)

        config = SwarmConfig(seed=9, swarm_size=swarm_size, objective_limit=10.0, tau0=1.0, workers=1)
        pso_minimize(objective, ConstraintSet(), Box.unit(3), config)
        return np.array(seen)

    small, large = initial_positions(5), initial_positions(20)
    assert small.shape == (5, 3) and large.shape == (20, 3)
    assert np.array_equal(small, large[:5])


def test_pso_records_failures():
    """評估失敗取哨兵值並記錄，不中斷搜索"""
    def objective(d):
        if d[0] > 0.5:
            raise ObjectiveEvaluationFailure(d, "unstable")
        return float(-d[0])

    result = pso_minimize(objective, ConstraintSet(), Box.unit(1), SwarmConfig(seed=3, swarm_size=20))
    assert result.failures
    assert all(f.reason == "unstable" for f in result.failures)
    assert result.best_point[0] <= 0.5


def test_mc_sample_exact_feasible_count():
    result = mc_sample(lambda d: float(d @ d), ConstraintSet(), McPlan(N=1000, seed=1), k=2)
    assert result.evaluations == 1000
    assert result.discarded == 0
    assert result.feasible


def test_mc_sample_discard_fraction():
    """δ1 ≤ 0 約掉一半的盒"""
    constraints = ConstraintSet((halfspace_constraint([1.0, 0.0], 0.0),))
    result = mc_sample(lambda d: float(d[1]), constraints, McPlan(N=20000, seed=7), k=2)
    assert result.evaluations == 20000
    fraction = result.discarded / (result.discarded + result.evaluations)
    assert fraction == pytest.approx(0.5, abs=0.02)
    assert result.best_point[0] <= 0.0


def test_mc_sample_timeout(monkeypatch):
    monkeypatch.setattr(settings, "MC_ACCEPTANCE_WINDOW", 4096)
    infeasible = ConstraintSet((polynomial_constraint([], 1.0),))
    with pytest.raises(FeasibleDrawTimeout):
        mc_sample(lambda d: 0.0, infeasible, McPlan(N=10), k=2)


def test_mc_sample_requires_dimension():
    with pytest.raises(ValueError):
        mc_sample(lambda d: 0.0, ConstraintSet(), McPlan(N=10))


def test_mc_tail_coverage_matches_bound():
    """
    N = N(γ=0.1, ε=0.05) 個均勻樣本的最小值：尾部質量超過 ε 的概率為 (1-ε)^N ≤ γ

    200 次重複中期望約 20 次超出，上限取 35 次。
    """
    gamma, epsilon = 0.1, 0.05
    N = mc_sample_size(gamma, epsilon)
    assert N == 45
    misses = 0
    for seed in range(200):
        result = mc_sample(lambda d: float(d[0]), ConstraintSet(), McPlan(N=N, seed=seed, workers=1), k=1)
        tail = (result.best_value + 1.0) / 2.0
        misses += int(tail > epsilon)
    assert misses <= 35
