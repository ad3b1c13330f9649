"""
共用的小型 LFR 植物
"""

import os
import sys

import numpy as np
import pytest

# 添加項目路徑到Python路徑
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.core.logging import setup_logging  # noqa: E402
from app.models.schemas import Requirement  # noqa: E402
from app.services.uncertain_model import BlockStructure, ConstraintSet, LfrPlant  # noqa: E402

setup_logging("WARNING", sink=sys.stderr)


def make_scalar_plant(gain: float = 2.0, constraints: ConstraintSet = ConstraintSet()) -> LfrPlant:
    """ẋ = (-1 + gain·δ) x + w, z = x"""
    return LfrPlant(
        A1=[[-1.0]], B1=[[gain]], B2=[[1.0]], C1=[[1.0]], C2=[[1.0]],
        D11=[[0.0]], D12=[[0.0]], D21=[[0.0]], D22=[[0.0]],
        blocks=BlockStructure((("a", 1),)), constraints=constraints, name="scalar",
    )


def make_static_plant() -> LfrPlant:
    """z = (1 + δ) w，無狀態"""
    return LfrPlant(
        A1=np.zeros((0, 0)), B1=np.zeros((0, 1)), B2=np.zeros((0, 1)),
        C1=np.zeros((1, 0)), C2=np.zeros((1, 0)),
        D11=[[0.0]], D12=[[1.0]], D21=[[1.0]], D22=[[1.0]],
        blocks=BlockStructure((("g", 1),)), name="static",
    )


def make_pair_plant() -> LfrPlant:
    """A(δ) = diag(-2 + δ1, -3 + 2δ2)，兩個解耦的一階模態"""
    return LfrPlant(
        A1=np.diag([-2.0, -3.0]), B1=np.diag([1.0, 2.0]), B2=np.ones((2, 1)),
        C1=np.eye(2), C2=np.ones((1, 2)),
        D11=np.zeros((2, 2)), D12=np.zeros((2, 1)), D21=np.zeros((1, 2)), D22=np.zeros((1, 1)),
        blocks=BlockStructure((("d1", 1), ("d2", 1))), name="pair",
    )


def make_synthesis_plant() -> LfrPlant:
    """
    ẋ = (0.5 + 1.5δ) x + w_d + u，輸出 [x, u, y = x + n]

    輸入 [w_d, n, u]，最後一個輸入為控制，最後一個輸出為量測。
    """
    return LfrPlant(
        A1=[[0.5]], B1=[[1.5]], B2=[[1.0, 0.0, 1.0]], C1=[[1.0]],
        C2=[[1.0], [0.0], [1.0]],
        D11=[[0.0]], D12=[[0.0, 0.0, 0.0]], D21=[[0.0], [0.0], [0.0]],
        D22=[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
        blocks=BlockStructure((("a", 1),)), name="synthesis_toy", n_controls=1, n_measurements=1,
    )


def make_bimodal_plant() -> LfrPlant:
    """A(δ) = diag(-1 + 1.5δ, -1 - 1.5δ)：δ = ±1 兩處失穩，控制通道不起作用"""
    return LfrPlant(
        A1=-np.eye(2), B1=np.diag([1.5, -1.5]), B2=np.array([[1.0, 0.0], [1.0, 0.0]]),
        C1=np.eye(2), C2=np.array([[1.0, 1.0], [0.0, 0.0]]),
        D11=np.zeros((2, 2)), D12=np.zeros((2, 2)), D21=np.zeros((2, 2)), D22=np.zeros((2, 2)),
        blocks=BlockStructure((("a", 2),)), name="bimodal", n_controls=1, n_measurements=1,
    )


@pytest.fixture
def scalar_plant() -> LfrPlant:
    return make_scalar_plant()


@pytest.fixture
def static_plant() -> LfrPlant:
    return make_static_plant()


@pytest.fixture
def pair_plant() -> LfrPlant:
    return make_pair_plant()


@pytest.fixture
def synthesis_plant() -> LfrPlant:
    return make_synthesis_plant()


@pytest.fixture
def bimodal_plant() -> LfrPlant:
    return make_bimodal_plant()


@pytest.fixture
def synthesis_requirements():
    return [
        Requirement(name="disturbance", inputs=[0], outputs=[0], norm="hinf", role="soft", weight=1.0),
        Requirement(name="noise_to_control", inputs=[1], outputs=[1], norm="hinf", role="hard", weight=0.1),
    ]


def random_plant(rng: np.random.Generator, n: int, k: int, nw: int = 1, nz: int = 1,
                 reps=None, feedthrough: bool = True) -> LfrPlant:
    """名義 A1 穩定的隨機 LFR；Δ 塊大小由 reps 給出"""
    reps = reps or [1] * k
    n_p = int(sum(reps))
    M = rng.standard_normal((n, n))
    A1 = M - (np.max(np.linalg.eigvals(M).real) + 1.0 + rng.random()) * np.eye(n)
    scale = 0.3
    return LfrPlant(
        A1=A1, B1=scale * rng.standard_normal((n, n_p)), B2=rng.standard_normal((n, nw)),
        C1=scale * rng.standard_normal((n_p, n)), C2=rng.standard_normal((nz, n)),
        D11=0.1 * rng.standard_normal((n_p, n_p)) if feedthrough else np.zeros((n_p, n_p)),
        D12=0.2 * rng.standard_normal((n_p, nw)), D21=np.zeros((nz, n_p)) if not feedthrough
        else 0.2 * rng.standard_normal((nz, n_p)),
        D22=np.zeros((nz, nw)),
        blocks=BlockStructure.from_repetitions(reps), name="random",
    )
