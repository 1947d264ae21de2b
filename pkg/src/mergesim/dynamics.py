"""Kinematic bicycle model: dynamics, RK4 integration, differential-flatness recovery."""

from __future__ import annotations

import math
from dataclasses import dataclass

EPSILON_SPEED = 1e-6


class SingularConfigurationError(ValueError):
    """Steering angle at +-pi/2 makes the heading rate undefined."""


class FlatnessSingularityError(ValueError):
    """Flat-output speed too low to recover heading/steering."""


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class VehicleParams:
    axle_distance: float = 2.5  # rear-to-front axle distance (m)
    length: float = 4.5         # body length (m)
    width: float = 1.8          # body width (m)
    u_max: float = 15.0         # m/s
    a_max: float = 3.0          # m/s^2
    beta_max: float = 0.6       # rad
    omega_max: float = 1.0      # rad/s

    def __post_init__(self):
        if min(self.axle_distance, self.length, self.width, self.u_max,
               self.a_max, self.beta_max, self.omega_max) <= 0:
            raise ValueError("vehicle parameters must be strictly positive")
        if self.length <= self.axle_distance:
            raise ValueError("body length must exceed the axle distance")


@dataclass(frozen=True)
class VehicleState:
    x: float      # rear-axle longitudinal position (m)
    y: float      # rear-axle lateral position (m)
    alpha: float  # heading (rad), kept in (-pi, pi]
    beta: float   # front-wheel steering angle (rad)


@dataclass(frozen=True)
class ControlInput:
    u: float      # longitudinal velocity (m/s), forward only
    omega: float  # steering-wheel angular velocity (rad/s)


@dataclass(frozen=True)
class FlatSample:
    """Flat output (x, y) with its first three time derivatives."""
    delta: tuple[float, float]
    d1: tuple[float, float]
    d2: tuple[float, float]
    d3: tuple[float, float]


@dataclass(frozen=True)
class FlatRecovery:
    alpha: float
    beta: float
    u: float
    omega: float


def state_derivative(state: VehicleState, control: ControlInput,
                     params: VehicleParams) -> tuple[float, float, float, float]:
    """Time derivative (x_dot, y_dot, alpha_dot, beta_dot) of the bicycle model."""
    if control.u < 0.0:
        raise ValueError("reverse motion is not supported (u < 0)")
    c = math.cos(state.beta)
    if abs(c) < 1e-12:
        raise SingularConfigurationError("steering angle at +-pi/2")
    return (
        control.u * math.cos(state.alpha),
        control.u * math.sin(state.alpha),
        (control.u / params.axle_distance) * math.tan(state.beta),
        control.omega,
    )


def step(state: VehicleState, control: ControlInput, params: VehicleParams,
         dt: float) -> VehicleState:
    """One classical RK4 step with the control held constant over dt."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")

    if state.beta == 0.0 and control.omega == 0.0 and control.u >= 0.0:
        # straight-line motion: all four RK4 slopes coincide, so the update
        # reduces to the same weighted sum evaluated once
        kx = control.u * math.cos(state.alpha)
        ky = control.u * math.sin(state.alpha)
        return VehicleState(
            state.x + dt / 6.0 * (kx + 2 * kx + 2 * kx + kx),
            state.y + dt / 6.0 * (ky + 2 * ky + 2 * ky + ky),
            normalize_angle(state.alpha), 0.0)

    def f(s: VehicleState):
        return state_derivative(s, control, params)

    def add(s: VehicleState, k, h: float) -> VehicleState:
        return VehicleState(s.x + h * k[0], s.y + h * k[1],
                            s.alpha + h * k[2], s.beta + h * k[3])

    k1 = f(state)
    k2 = f(add(state, k1, dt / 2.0))
    k3 = f(add(state, k2, dt / 2.0))
    k4 = f(add(state, k3, dt))
    nxt = VehicleState(
        state.x + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        state.y + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        state.alpha + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
        state.beta + dt / 6.0 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3]),
    )
    return VehicleState(nxt.x, nxt.y, normalize_angle(nxt.alpha), nxt.beta)


def flat_recover(sample: FlatSample, params: VehicleParams) -> FlatRecovery:
    """Recover (alpha, beta) and (u, omega) from the flat output derivatives.

    The planar path (delta1, delta2) and its first three derivatives determine
    every remaining state and control of the bicycle model algebraically; no
    integration is required.
    """
    d1x, d1y = sample.d1
    d2x, d2y = sample.d2
    d3x, d3y = sample.d3

    u_sq = d1x * d1x + d1y * d1y
    u = math.sqrt(u_sq)
    if u <= EPSILON_SPEED:
        raise FlatnessSingularityError("flat recovery undefined at standstill")

    alpha = math.atan2(d1y, d1x)
    nu = d1x * d2y - d1y * d2x          # signed curvature numerator
    r = params.axle_distance
    beta = math.atan(nu * r / (u_sq * u))

    nu_dot_term = (d1x * d3y - d1y * d3x) * u_sq
    bend_term = 3.0 * nu * (d1x * d2x + d1y * d2y)
    omega = (nu_dot_term - bend_term) * u * r / (u_sq ** 3 + nu * nu * r * r)

    return FlatRecovery(alpha=alpha, beta=beta, u=u, omega=omega)
