import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dragplan.params import VehicleParams
from dragplan.vehicle import (
    ControlInput,
    DivergenceError,
    QuadState,
    aero_forces,
    allocate_rotors,
    orthonormalize,
    rotation_from_axis_angle,
    rotor_wrench,
    step_dynamics,
)


def hover_input(params):
    return ControlInput(params.mass * params.gravity, np.zeros(3))


class TestAeroForces:
    def test_zero_velocity_gives_zero_force(self, params):
        state = QuadState([1, 2, 3], np.zeros(3),
                          rotation_from_axis_angle([0.1, 0.9, 0.2], 1.1),
                          [0.3, 0.2, 0.1], np.full(4, 900.0))
        assert np.array_equal(aero_forces(state, params), np.zeros(3))

    def test_parasitic_term_only(self):
        params = VehicleParams(parasitic_drag=[0.3, 0.3, 0.5],
                               rotor_drag=[0.0, 0.0, 0.0])
        state = QuadState(np.zeros(3), [1.0, 0.0, 0.0], np.eye(3),
                          np.zeros(3), np.zeros(4))
        np.testing.assert_allclose(aero_forces(state, params), [-0.3, 0.0, 0.0],
                                   atol=1e-15)

    def test_rotor_term_only(self):
        # -k_z * eta_s * v_z = -1e-5 * 4000 * 2
        params = VehicleParams(parasitic_drag=[0.0, 0.0, 0.0],
                               rotor_drag=[1e-5, 1e-5, 1e-5])
        state = QuadState(np.zeros(3), [0.0, 0.0, 2.0], np.eye(3),
                          np.zeros(3), np.full(4, 1000.0))
        np.testing.assert_allclose(aero_forces(state, params), [0.0, 0.0, -0.08],
                                   rtol=1e-12)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_odd_in_velocity_at_fixed_rotor_speed(self, seed):
        rng = np.random.default_rng(seed)
        params = VehicleParams()
        rot = rotation_from_axis_angle(rng.normal(size=3) + 1e-3, rng.uniform(-3, 3))
        v = rng.uniform(-5, 5, 3)
        eta = rng.uniform(0, 2500, 4)
        a = QuadState(np.zeros(3), v, rot, np.zeros(3), eta)
        b = QuadState(np.zeros(3), -v, rot, np.zeros(3), eta)
        np.testing.assert_array_equal(aero_forces(a, params),
                                      -aero_forces(b, params))


class TestAllocation:
    def test_hover_gives_equal_speeds(self, params):
        speeds, saturated = allocate_rotors(hover_input(params), params)
        expected = np.sqrt(params.mass * params.gravity / (4 * params.thrust_coeff))
        np.testing.assert_allclose(speeds, expected, rtol=1e-12)
        assert not saturated

    def test_excess_thrust_clamps_all_rotors(self, params):
        u = ControlInput(2.0 * params.max_collective_thrust, np.zeros(3))
        speeds, saturated = allocate_rotors(u, params)
        np.testing.assert_array_equal(speeds, params.rotor_speed_max)
        assert saturated

    def test_negative_thrust_clamps_to_minimum(self, params):
        speeds, saturated = allocate_rotors(ControlInput(-1.0, np.zeros(3)), params)
        np.testing.assert_array_equal(speeds, params.rotor_speed_min)
        assert saturated

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_roundtrip_reproduces_feasible_commands(self, seed):
        rng = np.random.default_rng(seed)
        params = VehicleParams()
        # draw speeds strictly inside the limits, then invert their wrench
        speeds = rng.uniform(200.0, 2400.0, 4)
        u = rotor_wrench(speeds, params)
        back, saturated = allocate_rotors(u, params)
        assert not saturated
        again = rotor_wrench(back, params)
        assert abs(again.collective_thrust - u.collective_thrust) \
            <= 1e-9 * abs(u.collective_thrust)
        np.testing.assert_allclose(again.torques, u.torques, rtol=1e-9, atol=1e-18)


class TestStepDynamics:
    def test_hover_equilibrium_is_fixed_point(self, zero_drag_params):
        params = zero_drag_params
        state = QuadState.hover(params)
        u = hover_input(params)
        for _ in range(100):
            state = step_dynamics(state, u, 0.01, params)
        assert np.abs(state.position).max() <= 1e-9
        assert np.abs(state.velocity).max() <= 1e-9
        assert np.abs(state.rotation - np.eye(3)).max() <= 1e-9
        assert np.abs(state.body_rates).max() <= 1e-9

    def test_free_fall_matches_closed_form(self, zero_drag_params):
        params = zero_drag_params
        state = QuadState.hover(params)
        u = ControlInput(0.0, np.zeros(3))
        for _ in range(1000):
            state = step_dynamics(state, u, 1e-3, params)
        assert abs(state.velocity[2] + params.gravity * 1.0) <= 1e-6
        assert abs(state.position[2] + 0.5 * params.gravity) <= 1e-6

    def test_torque_free_rotation_conserves_energy(self, zero_drag_params):
        params = zero_drag_params
        state = QuadState(np.zeros(3), np.zeros(3), np.eye(3),
                          [2.0, -1.0, 3.0], np.zeros(4))
        u = ControlInput(0.0, np.zeros(3))
        ke0 = 0.5 * state.body_rates @ (params.inertia @ state.body_rates)
        for _ in range(1000):
            state = step_dynamics(state, u, 1e-3, params)
        ke1 = 0.5 * state.body_rates @ (params.inertia @ state.body_rates)
        assert abs(ke1 - ke0) <= 1e-6

    def test_integrator_order(self, params):
        rot = rotation_from_axis_angle([0.3, -0.5, 0.8], 0.4)
        state = QuadState([0.1, -0.2, 0.3], [0.5, 0.4, -0.3], rot,
                          [1.0, -2.0, 0.5], np.full(4, 1500.0))
        u = ControlInput(0.4, [1e-4, -2e-4, 5e-5])

        def propagate(s, dt, n):
            for _ in range(n):
                s = step_dynamics(s, u, dt, params)
            return s

        def gap(a, b):
            return max(np.abs(a.position - b.position).max(),
                       np.abs(a.velocity - b.velocity).max(),
                       np.abs(a.rotation - b.rotation).max(),
                       np.abs(a.body_rates - b.body_rates).max())

        h = 0.02
        err_h = gap(propagate(state, h, 1), propagate(state, h / 64, 64))
        err_h2 = gap(propagate(state, h / 2, 1), propagate(state, h / 128, 64))
        assert err_h / err_h2 >= 2 ** 4

    def test_divergence_error_on_blowup(self, params):
        state = QuadState(np.zeros(3), [9e5, 0, 0], np.eye(3),
                          np.zeros(3), np.zeros(4))
        u = ControlInput(0.0, np.zeros(3))
        # parasitic drag at 9e5 m/s decelerates at ~1e10 g; state leaves the
        # admissible range within the step
        with pytest.raises(DivergenceError):
            for _ in range(200):
                state = step_dynamics(state, u, 0.01, params)

    def test_dt_validation(self, params):
        state = QuadState.hover(params)
        with pytest.raises(ValueError):
            step_dynamics(state, hover_input(params), 0.06, params)
        with pytest.raises(ValueError):
            step_dynamics(state, hover_input(params), 0.0, params)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_rotation_stays_orthonormal(self, seed):
        rng = np.random.default_rng(seed)
        params = VehicleParams()
        state = QuadState(
            rng.uniform(-1, 1, 3), rng.uniform(-3, 3, 3),
            rotation_from_axis_angle(rng.normal(size=3) + 1e-3, rng.uniform(-3, 3)),
            rng.uniform(-5, 5, 3), rng.uniform(0, 2500, 4))
        u = ControlInput(rng.uniform(0, 0.55), rng.uniform(-5e-3, 5e-3, 3))
        for _ in range(5):
            state = step_dynamics(state, u, 0.01, params)
        defect = np.abs(state.rotation.T @ state.rotation - np.eye(3)).max()
        assert defect <= 1e-9
        assert abs(np.linalg.det(state.rotation) - 1.0) <= 1e-9


class TestStateInvariants:
    def test_rejects_non_orthonormal_rotation(self):
        bad = np.eye(3) + 0.01
        with pytest.raises(ValueError):
            QuadState(np.zeros(3), np.zeros(3), bad, np.zeros(3), np.zeros(4))

    def test_rejects_reflection(self):
        flip = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            QuadState(np.zeros(3), np.zeros(3), flip, np.zeros(3), np.zeros(4))

    def test_orthonormalize_fixes_drift(self):
        r = rotation_from_axis_angle([1, 1, 1], 0.7) + 1e-6
        fixed = orthonormalize(r)
        assert np.abs(fixed.T @ fixed - np.eye(3)).max() <= 1e-12


class TestParams:
    def test_validation(self):
        with pytest.raises(Exception):
            VehicleParams(mass=-1.0)
        with pytest.raises(Exception):
            VehicleParams(parasitic_drag=[-0.1, 0, 0])
        with pytest.raises(Exception):
            VehicleParams(rotor_speed_min=100.0, rotor_speed_max=100.0)

    def test_zero_drag_removes_aero_force_entirely(self, zero_drag_params, rng):
        rot = rotation_from_axis_angle(rng.normal(size=3) + 1e-3, 1.0)
        state = QuadState(np.zeros(3), rng.uniform(-5, 5, 3), rot,
                          np.zeros(3), rng.uniform(0, 2500, 4))
        assert np.array_equal(aero_forces(state, zero_drag_params), np.zeros(3))
