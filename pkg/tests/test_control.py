import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dragplan.control import (
    FlatState,
    SingularThrustError,
    flat_to_reference,
    se3_control,
    vee,
)
from dragplan.params import Se3Gains, VehicleParams
from dragplan.rollout import simulate_closed_loop
from dragplan.vehicle import QuadState, hat, rotation_from_axis_angle


def rotz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TestFlatToReference:
    def test_hover(self, params):
        rot, thrust, rates = flat_to_reference(FlatState.hover(), params)
        np.testing.assert_allclose(rot, np.eye(3), atol=1e-15)
        assert thrust == pytest.approx(params.mass * params.gravity, rel=1e-12)
        np.testing.assert_array_equal(rates, np.zeros(3))

    def test_free_fall_is_singular(self, params):
        flat = FlatState(np.zeros(3), np.zeros(3), [0.0, 0.0, -params.gravity],
                         np.zeros(3), np.zeros(3), 0.0, 0.0)
        with pytest.raises(SingularThrustError):
            flat_to_reference(flat, params)

    def test_lateral_acceleration_tilts_body_axis(self, params):
        flat = FlatState(np.zeros(3), np.zeros(3), [params.gravity, 0.0, 0.0],
                         np.zeros(3), np.zeros(3), 0.0, 0.0)
        rot, thrust, _ = flat_to_reference(flat, params)
        np.testing.assert_allclose(rot[:, 2], [1 / np.sqrt(2), 0.0, 1 / np.sqrt(2)],
                                   rtol=1e-12)
        assert thrust == pytest.approx(params.mass * params.gravity * np.sqrt(2),
                                       rel=1e-12)

    def test_yaw_rate_feedforward_at_hover(self, params):
        flat = FlatState(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3),
                         np.zeros(3), 0.3, 0.7)
        _, _, rates = flat_to_reference(flat, params)
        assert rates[2] == pytest.approx(0.7, rel=1e-12)


class TestSe3Control:
    def test_exact_hover_reference_gives_exact_hover_command(self, params, gains):
        state = QuadState.hover(params)
        u = se3_control(state, FlatState.hover(), gains, params)
        assert u.collective_thrust == pytest.approx(params.mass * params.gravity,
                                                    abs=1e-15)
        np.testing.assert_array_equal(u.torques, np.zeros(3))

    def test_position_error_term_enters_thrust_vector(self, params):
        gains = Se3Gains(k_p=[49.0, 49.0, 49.0], k_v=[14.0, 14.0, 14.0])
        state = QuadState.hover(params, position=[0.1, 0.0, 0.0])
        # thrust vector x-component before projection: -m * k_px * e_px
        e_p = np.array([0.1, 0.0, 0.0])
        f_des_x = params.mass * (-gains.k_p * e_p)[0]
        # body z is world z here, so the projected thrust keeps only z; check
        # against the reconstructed vector via the z-tilt of R_des instead
        u = se3_control(state, FlatState.hover(), gains, params)
        # at R = I the projection drops e_p; reconstruct the commanded vector
        f_des = params.mass * (-gains.k_p * e_p + params.gravity * np.array([0, 0, 1.0]))
        assert f_des[0] == pytest.approx(f_des_x)
        assert u.collective_thrust == pytest.approx(f_des[2], rel=1e-12)

    def test_propagates_singularity(self, params, gains):
        state = QuadState.hover(params)
        flat = FlatState(np.zeros(3), np.zeros(3), [0.0, 0.0, -params.gravity],
                         np.zeros(3), np.zeros(3), 0.0, 0.0)
        with pytest.raises(SingularThrustError):
            se3_control(state, flat, gains, params)

    def test_stateless(self, params, gains, rng):
        rot = rotation_from_axis_angle([0.1, 0.2, 0.9], 0.5)
        state = QuadState([0.3, -0.2, 1.0], [0.5, 0.1, -0.2], rot,
                          [0.2, -0.4, 0.1], np.full(4, 1700.0))
        flat = FlatState([0.2, 0.0, 1.1], [0.4, 0.0, 0.0], [0.5, 0.2, 0.0],
                         [0.1, 0.0, 0.0], np.zeros(3), 0.2, 0.1)
        u1 = se3_control(state, flat, gains, params)
        u2 = se3_control(state, flat, gains, params)
        assert u1.collective_thrust == u2.collective_thrust
        np.testing.assert_array_equal(u1.torques, u2.torques)

    def test_near_zero_gains_reduce_to_feedforward(self, params):
        # gains must be positive by the type invariant; 1e-12 isolates the
        # feedforward path to well below the assertion tolerance
        tiny = Se3Gains(k_p=[1e-12] * 3, k_v=[1e-12] * 3,
                        k_r=[1e-12] * 3, k_omega=[1e-12] * 3)
        flat = FlatState([3.0, -1.0, 2.0], [1.0, 0.5, 0.0], [2.0, 0.0, 1.0],
                         [0.5, -0.2, 0.0], np.zeros(3), 0.4, 0.2)
        rot_d, thrust_d, rates_d = flat_to_reference(flat, params)
        state = QuadState(flat.position + [0.5, -0.3, 0.2],
                          flat.velocity + [0.2, 0.0, -0.1],
                          rot_d, rates_d, np.full(4, 1700.0))
        u = se3_control(state, flat, tiny, params)
        f_ff = params.mass * (flat.acceleration + [0, 0, params.gravity])
        expected_thrust = float(f_ff @ (rot_d @ np.array([0.0, 0.0, 1.0])))
        assert u.collective_thrust == pytest.approx(expected_thrust, abs=1e-9)
        expected_torque = np.cross(rates_d, params.inertia @ rates_d)
        np.testing.assert_allclose(u.torques, expected_torque, atol=1e-9)

    @given(st.floats(-3.0, 3.0), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_yaw_equivariance(self, angle, seed):
        rng = np.random.default_rng(seed)
        params = VehicleParams()
        gains = Se3Gains()
        rot = rotation_from_axis_angle(rng.normal(size=3) + 1e-3, rng.uniform(-1, 1))
        state = QuadState(rng.uniform(-2, 2, 3), rng.uniform(-2, 2, 3), rot,
                          rng.uniform(-2, 2, 3), np.full(4, 1700.0))
        flat = FlatState(rng.uniform(-2, 2, 3), rng.uniform(-2, 2, 3),
                         rng.uniform(-3, 3, 3), rng.uniform(-2, 2, 3),
                         np.zeros(3), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5))
        rz = rotz(angle)
        state_r = QuadState(rz @ state.position, rz @ state.velocity,
                            rz @ state.rotation, state.body_rates,
                            state.rotor_speeds)
        flat_r = FlatState(rz @ flat.position, rz @ flat.velocity,
                           rz @ flat.acceleration, rz @ flat.jerk,
                           rz @ flat.snap, flat.yaw + angle, flat.yaw_rate)
        u = se3_control(state, flat, gains, params)
        u_r = se3_control(state_r, flat_r, gains, params)
        assert u_r.collective_thrust == pytest.approx(u.collective_thrust,
                                                      rel=1e-9, abs=1e-12)
        assert np.linalg.norm(u_r.torques) == pytest.approx(
            np.linalg.norm(u.torques), rel=1e-9, abs=1e-12)


class TestClosedLoopTracking:
    def test_slow_circle_rms_error(self, zero_drag_params, gains):
        omega, radius = 0.5, 1.0

        def ref(t):
            c, s = np.cos(omega * t), np.sin(omega * t)
            return FlatState(
                [radius * c, radius * s, 1.0],
                [-radius * omega * s, radius * omega * c, 0.0],
                [-radius * omega ** 2 * c, -radius * omega ** 2 * s, 0.0],
                [radius * omega ** 3 * s, -radius * omega ** 3 * c, 0.0],
                [radius * omega ** 4 * c, radius * omega ** 4 * s, 0.0],
                0.0, 0.0)

        lap = 2 * np.pi / omega
        trace = simulate_closed_loop(ref, lap, 0.01, gains, zero_drag_params)
        assert not trace.crashed
        err = np.linalg.norm(trace.position - trace.reference[:, :3], axis=1)
        rms = float(np.sqrt(np.mean(err ** 2)))
        assert rms <= 0.05


class TestFlatState:
    def test_vector_dimension(self):
        assert FlatState.hover().as_vector().shape == (17,)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            FlatState([np.nan, 0, 0], np.zeros(3), np.zeros(3), np.zeros(3),
                      np.zeros(3), 0.0, 0.0)


def test_vee_inverts_hat(rng):
    w = rng.normal(size=3)
    np.testing.assert_array_equal(vee(hat(w)), w)
