"""
LFR 植物、約束與模型文件測試
"""

import json

import numpy as np
import pytest

from app.core.exceptions import DimensionMismatchError, H2AssumptionError, IllPosedLftError, ModelFileError
from app.services.uncertain_model import (
    AffineResidualMass,
    BlockStructure,
    ConstraintSet,
    LfrPlant,
    StateSpace,
    ball_constraint,
    close_controller,
    close_loop,
    dump_model_file,
    eval_constraints,
    expand_delta,
    halfspace_constraint,
    load_model_file,
    plant_to_model,
    polynomial_constraint,
    tilde_delta,
)
from tests.conftest import make_scalar_plant, make_synthesis_plant


def test_expand_delta_block_diagonal():
    """Δ = diag(δ_i I_{n_i})"""
    assert np.array_equal(expand_delta([0.0, 0.0], BlockStructure.from_repetitions([1, 2])), np.zeros((3, 3)))
    assert np.array_equal(expand_delta([0.5], BlockStructure.from_repetitions([2])), np.diag([0.5, 0.5]))
    assert np.array_equal(expand_delta([1.0, -1.0], BlockStructure.from_repetitions([1, 2])),
                          np.diag([1.0, -1.0, -1.0]))


def test_expand_delta_is_linear():
    rng = np.random.default_rng(3)
    blocks = BlockStructure.from_repetitions([1, 3, 2])
    for _ in range(10):
        d1, d2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        a, b = rng.standard_normal(2)
        combined = expand_delta(a * d1 + b * d2, blocks)
        assert np.allclose(combined, a * expand_delta(d1, blocks) + b * expand_delta(d2, blocks), atol=1e-15)


def test_expand_delta_length_mismatch():
    with pytest.raises(DimensionMismatchError):
        expand_delta([0.1, 0.2], BlockStructure.from_repetitions([1]))


def test_block_structure_rejects_bad_entries():
    with pytest.raises(DimensionMismatchError):
        BlockStructure((("a", 1), ("a", 2)))
    with pytest.raises(DimensionMismatchError):
        BlockStructure((("a", 0),))


def test_tilde_delta_values():
    """Δ̃ = (I - ΔD11)⁻¹Δ"""
    assert np.array_equal(tilde_delta(np.zeros((2, 2)), np.ones((2, 2))), np.zeros((2, 2)))
    delta = np.diag([0.3, -0.7])
    assert np.allclose(tilde_delta(delta, np.zeros((2, 2))), delta)
    assert tilde_delta([[0.5]], [[0.5]])[0, 0] == pytest.approx(2.0 / 3.0, rel=1e-14)


def test_tilde_delta_factorizations_agree():
    rng = np.random.default_rng(3)
    delta = np.diag(rng.uniform(-1, 1, 4))
    D11 = 0.2 * rng.standard_normal((4, 4))
    left = tilde_delta(delta, D11)
    right = delta @ np.linalg.inv(np.eye(4) - D11 @ delta)
    assert np.allclose(left, right, atol=1e-13)


def test_tilde_delta_singular():
    with pytest.raises(IllPosedLftError):
        tilde_delta([[1.0]], [[1.0]])


def test_close_loop_nominal_and_scalar():
    """δ = 0 時閉環等於名義矩陣；標量植物 A = A1 + B1 δ C1"""
    plant = make_scalar_plant(gain=1.0)
    nominal = close_loop(plant, [0.0])
    assert nominal.well_posed
    assert np.array_equal(nominal.A, plant.A1)
    assert np.array_equal(nominal.B, plant.B2)
    assert np.array_equal(nominal.C, plant.C2)
    assert np.array_equal(nominal.D, plant.D22)
    assert close_loop(plant, [0.5]).A[0, 0] == pytest.approx(-0.5)


def test_close_loop_ill_posed_flag():
    plant = LfrPlant(
        A1=[[-1.0]], B1=[[1.0]], B2=[[1.0]], C1=[[1.0]], C2=[[1.0]],
        D11=[[1.0]], D12=[[0.0]], D21=[[0.0]], D22=[[0.0]],
        blocks=BlockStructure((("a", 1),)),
    )
    closed = close_loop(plant, [1.0])
    assert not closed.well_posed
    with pytest.raises(IllPosedLftError):
        closed.state_space


def test_plant_dimension_check():
    with pytest.raises(DimensionMismatchError):
        LfrPlant(
            A1=[[-1.0]], B1=[[1.0, 0.0]], B2=[[1.0]], C1=[[1.0]], C2=[[1.0]],
            D11=[[0.0]], D12=[[0.0]], D21=[[0.0]], D22=[[0.0]],
            blocks=BlockStructure((("a", 1),)),
        )


def test_eval_constraints():
    """無約束時空向量且可行；球約束在原點為 -1"""
    values, feasible = eval_constraints(make_scalar_plant(), [0.3])
    assert values.size == 0 and feasible

    plant = make_scalar_plant(constraints=ConstraintSet((ball_constraint(1.0),)))
    values, feasible = eval_constraints(plant, [0.0])
    assert values.tolist() == [-1.0]
    assert feasible


def test_constraint_gradients_match_fd():
    """解析梯度與中心差分一致"""
    delta = np.array([0.3, -0.4])
    poly = polynomial_constraint([(2.0, [2, 1]), (-1.0, [0, 3])], constant=0.1)
    # 2 δ1² δ2 - δ2³ + 0.1
    assert poly.value(delta) == pytest.approx(2 * 0.09 * -0.4 + 0.064 + 0.1)
    for constraint in (poly, ball_constraint(0.8, center=[0.1, 0.1]), halfspace_constraint([1.0, -2.0], 0.3)):
        numeric = np.array([
            (constraint.value(delta + e) - constraint.value(delta - e)) / 2e-6
            for e in np.eye(2) * 1e-6
        ])
        assert np.allclose(constraint.gradient(delta), numeric, atol=1e-6)


def test_residual_mass_constraint():
    """M_r = M_P - L_PᵀL_P，c = -λ_min(M_r)；參與因子放大後變為不可行"""
    model = AffineResidualMass(
        M0=np.diag([2.0, 3.0]), M_terms=(np.diag([0.5, 0.0]),),
        L0=np.diag([1.0, 1.0]), L_terms=(np.diag([0.0, 0.9]),),
    )
    Mr = model.residual(np.array([0.4]))
    assert np.array_equal(Mr, Mr.T)
    assert model.constraint_value(np.array([0.0])) == pytest.approx(-1.0)
    assert model.constraint_value(np.array([0.4])) == pytest.approx(-np.linalg.eigvalsh(Mr)[0])

    # L_P = 0 時 M_r = M_P
    no_coupling = AffineResidualMass(np.diag([2.0, 3.0]), (np.zeros((2, 2)),), np.zeros((2, 2)), (np.zeros((2, 2)),))
    assert np.array_equal(no_coupling.residual(np.array([0.7])), np.diag([2.0, 3.0]))

    scaled = AffineResidualMass(np.diag([2.0, 3.0]), (np.zeros((2, 2)),), np.diag([1.0, 1.0]),
                                (np.diag([0.0, 1.0]),))
    # 第二個模態 3 - (1 + δ)²，δ > √3 - 1 時不可行
    assert scaled.constraint_value(np.array([0.5])) < 0.0
    assert scaled.constraint_value(np.array([0.9])) > 0.0

    delta = np.array([0.3])
    numeric = (model.constraint_value(delta + 1e-6) - model.constraint_value(delta - 1e-6)) / 2e-6
    assert model.constraint_gradient(delta)[0] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_select_channel_and_without_controls():
    plant = make_synthesis_plant()
    selected = plant.select_channel([1], [0])
    assert selected.B2.shape == (1, 2)
    assert selected.C2.shape == (2, 1)
    assert selected.n_controls == 1
    open_loop = plant.without_control_channels()
    assert open_loop.n_inputs == 2 and open_loop.n_outputs == 2
    assert open_loop.n_controls == 0
    with pytest.raises(DimensionMismatchError):
        plant.select_channel([2], [0])


def test_h2_assumptions(static_plant):
    """D22 ≠ 0 的通道不允許 H2 查詢"""
    with pytest.raises(H2AssumptionError):
        static_plant.check_h2_assumptions()
    make_scalar_plant().check_h2_assumptions()


def test_close_controller_static_gain():
    """u = Dk y：閉環 A = 0.5 + 1.5δ + Dk"""
    plant = make_synthesis_plant()
    closed = close_controller(plant, StateSpace.static([[-2.0]]))
    assert closed.n_controls == 0 and closed.n_measurements == 0
    assert close_loop(closed, [1.0]).A[0, 0] == pytest.approx(0.5 + 1.5 - 2.0)
    # 噪聲到控制的直通為 Dk
    assert closed.D22[1, 1] == pytest.approx(-2.0)


def test_close_controller_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        close_controller(make_synthesis_plant(), StateSpace.static([[1.0, 2.0]]))


def test_model_file_round_trip(tmp_path):
    plant = make_scalar_plant(constraints=ConstraintSet((
        halfspace_constraint([1.0], 0.5, name="upper"),
        polynomial_constraint([(1.0, [2])], -0.81, name="square"),
    )))
    path = tmp_path / "scalar.json"
    dump_model_file(plant, path)
    loaded = load_model_file(path)
    assert np.array_equal(loaded.A1, plant.A1)
    assert loaded.blocks == plant.blocks
    assert len(loaded.constraints) == 2
    for delta in ([0.0], [0.7], [-0.95]):
        assert np.allclose(loaded.constraints.values(np.array(delta)), plant.constraints.values(np.array(delta)))


def test_model_file_equality_constraint(tmp_path):
    """等式約束展開為兩個不等式"""
    payload = plant_to_model(make_scalar_plant()).model_dump()
    payload["constraints"] = [{"type": "builtin", "name": "pin",
                               "parameters": {"name": "halfspace", "normal": [1.0], "offset": 0.2},
                               "equality": True}]
    path = tmp_path / "eq.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    plant = load_model_file(path)
    assert len(plant.constraints) == 2
    assert plant.constraints.is_feasible(np.array([0.2]))
    assert not plant.constraints.is_feasible(np.array([0.3]))
    assert not plant.constraints.is_feasible(np.array([0.1]))


@pytest.mark.parametrize("mutate", [
    lambda p: p.update({"unknown_key": 1}),
    lambda p: p.update({"A1": [[1.0, 2.0]]}),
    lambda p: p.update({"constraints": [{"type": "builtin", "parameters": {"name": "sphere"}}]}),
])
def test_model_file_rejects_invalid(tmp_path, mutate):
    payload = plant_to_model(make_scalar_plant()).model_dump()
    mutate(payload)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    with pytest.raises(ModelFileError):
        load_model_file(path)


def test_model_file_missing(tmp_path):
    with pytest.raises(ModelFileError):
        load_model_file(tmp_path / "missing.json")
