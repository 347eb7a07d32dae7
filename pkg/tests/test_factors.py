import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbp_planner import factors as fx
from oracles import DiscField, jacobian_errors


def test_robot_state_round_trip_and_validation():
    s = fx.RobotState.from_vector([1, 2, 3, 4])
    assert np.array_equal(s.vector, [1, 2, 3, 4])
    with pytest.raises(ValueError):
        fx.RobotState([np.nan, 0], [0, 0])


def test_params_validation():
    with pytest.raises(ValueError):
        fx.FactorParams(sigma_d=0.0)
    with pytest.raises(ValueError):
        fx.FactorParams(epsilon=-1.0)
    assert fx.FactorParams(robot_radius=2.0, epsilon=0.5).critical_distance == 4.5


def test_pose_factor_examples():
    f = fx.pose_factor(np.zeros(4), 1.0)
    assert np.array_equal(f.meas_precision, np.eye(4))
    assert np.allclose(fx.pose_factor(np.zeros(4), 1e-15).meas_precision, 1e30 * np.eye(4), rtol=1e-12, atol=0)
    f = fx.pose_factor(np.array([1.0, 2, 3, 4]), 0.5)
    assert np.allclose(f.meas_precision @ f.z, 4 * np.array([1.0, 2, 3, 4]))
    with pytest.raises(ValueError):
        fx.pose_factor(np.zeros(4), 0.0)


def test_dynamics_examples():
    f = fx.dynamics_factor(2.0, 1.0)
    x = np.array([0.0, 0, 1, 0, 2, 0, 1, 0])
    assert np.allclose(f.h(x), 0.0)
    lam = fx.dynamics_precision(1.0, 1.0)
    assert np.allclose(lam[np.ix_([0, 2], [0, 2])], [[12, -6], [-6, 4]])
    assert np.array_equal(fx.transition(0.0), np.eye(4))
    with pytest.raises(ValueError):
        fx.dynamics_factor(0.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 20.0), st.floats(0.05, 5.0))
def test_dynamics_precision_inverts_covariance(dt, sigma_d):
    prod = fx.dynamics_precision(dt, sigma_d) @ fx.dynamics_covariance(dt, sigma_d)
    assert np.allclose(prod, np.eye(4), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 10.0), st.lists(st.floats(-50, 50), min_size=4, max_size=4))
def test_constant_velocity_propagation_has_zero_residual(dt, x):
    x = np.array(x)
    nxt = fx.transition(dt) @ x
    assert np.allclose(fx.dynamics_h(x, nxt, dt), 0.0, atol=1e-9)


def test_obstacle_examples():
    radius = np.array(2.0)
    assert fx.obstacle_terms(5.0, np.array([1.0, 0]), radius)[0] == 0.0
    assert fx.obstacle_terms(0.0, np.array([1.0, 0]), radius)[0] == 1.0
    h, jac = fx.obstacle_terms(1.0, np.array([1.0, 0]), radius)
    assert h == 0.5 and np.allclose(jac, [-0.5, 0, 0, 0])
    assert fx.obstacle_terms(2.0, np.array([1.0, 0]), radius)[0] == 0.0


def test_obstacle_margin_widens_support():
    params = fx.FactorParams(robot_radius=2.0, obstacle_margin=1.0)
    assert params.obstacle_radius == 3.0
    assert fx.FactorParams(robot_radius=2.0).obstacle_radius == 2.0
    assert fx.obstacle_terms(2.5, np.array([1.0, 0]), np.array(params.obstacle_radius))[0] > 0.0
    with pytest.raises(ValueError):
        fx.FactorParams(obstacle_margin=-0.1)


def test_interrobot_examples():
    params = fx.FactorParams(robot_radius=2.0, epsilon=0.5)
    f = fx.interrobot_factor(1.0, params)
    at = lambda d: f.h(np.array([0.0, 0, 0, 0, d, 0, 0, 0]))[0]
    assert at(4.5) == 0.0 and at(2.25) == 0.5 and at(10.0) == 0.0
    assert np.isclose(fx.interrobot_factor(2.0, fx.FactorParams(sigma_r=0.005)).meas_precision[0, 0], 10000.0)
    with pytest.raises(ValueError):
        fx.interrobot_factor(0.0, params)


def test_interrobot_overlap_direction_is_fixed():
    h, jac = fx.interrobot_terms(np.zeros(2), np.zeros(2), 4.0)
    assert h == 1.0
    assert np.allclose(jac, [-0.25, 0, 0, 0, 0.25, 0, 0, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-6, 6), min_size=4, max_size=4), st.floats(0.5, 8.0))
def test_interrobot_symmetry_and_range(pos, r_star):
    a, b = np.array(pos[:2]), np.array(pos[2:])
    h_ab = fx.interrobot_terms(a, b, r_star)[0]
    h_ba = fx.interrobot_terms(b, a, r_star)[0]
    assert h_ab == h_ba
    assert 0.0 <= h_ab <= 1.0


def test_pair_critical_distance():
    assert fx.pair_critical_distance(2.0, 3.0, 0.2) == pytest.approx(5.2)
    assert fx.pair_critical_distance(2.0, 2.0, 0.2) == pytest.approx(fx.FactorParams(epsilon=0.2).critical_distance)


def test_jacobians_match_finite_differences():
    errors = jacobian_errors(np.random.default_rng(0), n=25)
    assert all(e < 1e-5 for e in errors.values()), errors


def test_zero_jacobian_outside_range():
    field = DiscField(np.array([0.0, 0.0]), 1.0)
    f = fx.obstacle_factor(field, 2.0, 0.005)
    x = np.array([10.0, 0, 0, 0])
    assert f.h(x)[0] == 0.0 and not f.jacobian(x).any()
