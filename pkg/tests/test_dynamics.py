"""Bicycle-model dynamics, RK4 integration, and flatness recovery."""

import math

import numpy as np
import pytest

from mergesim.dynamics import (ControlInput, FlatSample,
                               FlatnessSingularityError,
                               SingularConfigurationError, VehicleParams,
                               VehicleState, flat_recover, normalize_angle,
                               state_derivative, step)


def circle_turn_closure(u, beta, params, dt, n):
    """Closure distance after integrating n fixed-control steps."""
    state = VehicleState(0.0, 0.0, 0.0, beta)
    control = ControlInput(u, 0.0)
    for _ in range(n):
        state = step(state, control, params, dt)
    return math.hypot(state.x, state.y)


class TestStateDerivative:
    def test_straight_motion(self, params):
        d = state_derivative(VehicleState(0, 0, 0, 0), ControlInput(1, 0), params)
        assert d == (1.0, 0.0, 0.0, 0.0)

    def test_heading_rotated(self, params):
        d = state_derivative(VehicleState(0, 0, math.pi / 2, 0),
                             ControlInput(2, 0), params)
        assert d[0] == pytest.approx(0.0, abs=1e-15)
        assert d[1] == 2.0
        assert d[2] == 0.0 and d[3] == 0.0

    def test_unit_tangent_steering(self):
        # tan(pi/4) = 1 forces alpha_dot = u / axle_distance
        params = VehicleParams(axle_distance=2.0, length=4.5)
        d = state_derivative(VehicleState(0, 0, 0, math.pi / 4),
                             ControlInput(1, 0.1), params)
        assert d[0] == pytest.approx(1.0)
        assert d[1] == 0.0
        assert d[2] == pytest.approx(0.5)
        assert d[3] == 0.1

    def test_singular_steering_rejected(self, params):
        with pytest.raises(SingularConfigurationError):
            state_derivative(VehicleState(0, 0, 0, math.pi / 2),
                             ControlInput(1, 0), params)

    def test_reverse_rejected(self, params):
        with pytest.raises(ValueError):
            state_derivative(VehicleState(0, 0, 0, 0), ControlInput(-1, 0), params)


class TestStep:
    def test_zero_control_fixed_point(self, params):
        s = VehicleState(3.0, -1.0, 0.5, 0.1)
        nxt = step(s, ControlInput(0.0, 0.0), params, 0.25)
        assert (nxt.x, nxt.y, nxt.beta) == (s.x, s.y, s.beta)
        assert nxt.alpha == pytest.approx(s.alpha)

    def test_straight_line_exact(self, params):
        nxt = step(VehicleState(0, 0, 0, 0), ControlInput(1, 0), params, 0.1)
        assert nxt.x == pytest.approx(0.1)
        assert nxt.y == 0.0 and nxt.alpha == 0.0 and nxt.beta == 0.0

    def test_straight_fast_path_matches_generic(self, params):
        # the beta == 0, omega == 0 shortcut must be bit-identical to the
        # four-slope evaluation it replaces
        s = VehicleState(1.0, 2.0, 0.37, 0.0)
        c = ControlInput(7.3, 0.0)
        fast = step(s, c, params, 0.1)
        kx = c.u * math.cos(s.alpha)
        ky = c.u * math.sin(s.alpha)
        assert fast.x == s.x + 0.1 / 6.0 * (kx + 2 * kx + 2 * kx + kx)
        assert fast.y == s.y + 0.1 / 6.0 * (ky + 2 * ky + 2 * ky + ky)

    def test_full_turn_returns_to_start(self):
        # constant steering traces a circle; per-step errors cancel by
        # symmetry over a whole revolution, so closure is near roundoff
        params = VehicleParams()
        u, beta = 1.0, 0.2
        period = 2 * math.pi * params.axle_distance / (u * math.tan(beta))
        assert circle_turn_closure(u, beta, params, period / 1000, 1000) < 1e-9

    def test_partial_turn_converges_to_analytic_arc(self):
        # on a fraction of the circle the truncation error survives, and
        # halving dt shrinks the endpoint error
        params = VehicleParams()
        u, beta = 1.0, 0.2
        w = u * math.tan(beta) / params.axle_distance
        radius = u / w
        arc = 0.5 * 2 * math.pi / w

        def endpoint_error(n):
            s = VehicleState(0.0, 0.0, 0.0, beta)
            for _ in range(n):
                s = step(s, ControlInput(u, 0.0), params, arc / n)
            a = w * arc
            return math.hypot(s.x - radius * math.sin(a),
                              s.y - radius * (1 - math.cos(a)))

        coarse, fine = endpoint_error(100), endpoint_error(200)
        assert coarse < 1e-3
        assert fine < coarse

    def test_bad_dt_rejected(self, params):
        with pytest.raises(ValueError):
            step(VehicleState(0, 0, 0, 0), ControlInput(1, 0), params, 0.0)

    def test_alpha_normalized(self, params):
        s = VehicleState(0, 0, math.pi - 1e-3, 0.3)
        nxt = step(s, ControlInput(5, 0), params, 0.5)
        assert -math.pi < nxt.alpha <= math.pi


class TestFlatRecover:
    def test_straight_line(self, params):
        rec = flat_recover(FlatSample((0, 0), (1, 0), (0, 0), (0, 0)), params)
        assert (rec.u, rec.alpha, rec.beta, rec.omega) == (1.0, 0.0, 0.0, 0.0)

    def test_diagonal_line(self, params):
        rec = flat_recover(FlatSample((0, 0), (1, 1), (0, 0), (0, 0)), params)
        assert rec.u == pytest.approx(math.sqrt(2))
        assert rec.alpha == pytest.approx(math.pi / 4)
        assert rec.beta == 0.0 and rec.omega == 0.0

    def test_circle(self):
        # delta(t) = (5 cos t, 5 sin t) at t=0: d1=(0,5), d2=(-5,0), d3=(0,-5)
        params = VehicleParams(axle_distance=2.0, length=4.5)
        rec = flat_recover(FlatSample((5, 0), (0, 5), (-5, 0), (0, -5)), params)
        assert rec.u == pytest.approx(5.0)
        assert rec.beta == pytest.approx(math.atan(2.0 / 5.0))
        assert rec.beta == pytest.approx(0.38051, abs=1e-5)
        assert rec.omega == pytest.approx(0.0, abs=1e-12)

    def test_standstill_rejected(self, params):
        with pytest.raises(FlatnessSingularityError):
            flat_recover(FlatSample((0, 0), (0, 0), (1, 0), (0, 0)), params)

    def test_alpha_beta_ranges(self, params, rng):
        for _ in range(200):
            d1 = rng.uniform(-10, 10, 2)
            if np.hypot(*d1) < 0.1:
                continue
            rec = flat_recover(FlatSample((0, 0), tuple(d1),
                                          tuple(rng.uniform(-3, 3, 2)),
                                          tuple(rng.uniform(-3, 3, 2))), params)
            assert -math.pi < rec.alpha <= math.pi
            assert -math.pi / 2 < rec.beta < math.pi / 2


def test_nonholonomic_residual_shrinks_with_dt(params):
    # front-axle velocity from finite differences must satisfy the rolling
    # constraint increasingly well as dt shrinks
    def residual(dt):
        state = VehicleState(0, 0, 0, 0.1)
        control = ControlInput(2.0, 0.05)
        states = [state]
        for _ in range(int(2.0 / dt)):
            state = step(state, control, params, dt)
            states.append(state)
        r = params.axle_distance
        xf = np.array([s.x + r * math.cos(s.alpha) for s in states])
        yf = np.array([s.y + r * math.sin(s.alpha) for s in states])
        ang = np.array([s.alpha + s.beta for s in states])
        dxf = np.gradient(xf, dt)
        dyf = np.gradient(yf, dt)
        res = dxf * np.sin(ang) - dyf * np.cos(ang)
        return float(np.max(np.abs(res[1:-1])))

    assert residual(0.001) < residual(0.01) < residual(0.1)


def test_normalize_angle_range():
    for a in np.linspace(-20, 20, 401):
        w = normalize_angle(float(a))
        assert -math.pi < w <= math.pi
        assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-12)
        assert math.sin(w) == pytest.approx(math.sin(a), abs=1e-12)


def test_params_validation():
    with pytest.raises(ValueError):
        VehicleParams(axle_distance=-1.0)
    with pytest.raises(ValueError):
        VehicleParams(axle_distance=5.0, length=4.5)  # body shorter than axle
