"""Agent kinematics, sensory encoders and motor decoding for the virtual bee."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

TWO_PI = 2.0 * math.pi


class DomainError(ValueError):
    """Raised when an input lies outside the domain of an operation."""


@dataclass(frozen=True)
class WorldParams:
    """Constants of the flight model.

    Attributes
    ----------
    rho : float
        Gain of the head-rotation term in the optic-flow encoder.
    phi_tn : float
        Angular offset of the optic-flow sensors, radians.
    mu : float
        Steering gain, radians per unit motor-rate difference.
    v_max : float
        Step length at speed 1, in unit steps per update.
    sigma_walk : float
        Standard deviation of the outbound heading increment, radians.
    outbound_speed : float
        Normalized speed during the forced walk.
    """

    rho: float = 2.0
    phi_tn: float = math.pi / 4
    mu: float = 1.6
    v_max: float = 70.0
    sigma_walk: float = 0.3
    outbound_speed: float = 1.0

    def __post_init__(self) -> None:
        if not self.rho > 0:
            raise DomainError(f"rho must be positive, got {self.rho}")
        if not self.v_max > 0:
            raise DomainError(f"v_max must be positive, got {self.v_max}")
        if not self.sigma_walk >= 0:
            raise DomainError(f"sigma_walk must be non-negative, got {self.sigma_walk}")
        if not 0.0 <= self.outbound_speed <= 1.0:
            raise DomainError(f"outbound_speed must lie in [0, 1], got {self.outbound_speed}")


@dataclass(frozen=True)
class AgentState:
    x: float = 0.0
    y: float = 0.0
    phi: float = 0.0
    phi_prev: float = 0.0
    speed: float = 1.0
    theta: float = 0.0
    step_index: int = 0

    def __post_init__(self) -> None:
        for name in ("phi", "phi_prev", "theta"):
            value = getattr(self, name)
            if not -math.pi < value <= math.pi:
                raise DomainError(f"{name}={value} is outside (-pi, pi]")
        if not 0.0 <= self.speed <= 1.0:
            raise DomainError(f"speed={self.speed} is outside [0, 1]")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class SensorRates:
    """Normalized compass and optic-flow rates (fractions of the maximum rate)."""

    tb1: np.ndarray
    tn_l: float
    tn_r: float


def wrap_angle(theta: float) -> float:
    """Map an angle onto (-pi, pi], sending -pi to pi."""
    if not math.isfinite(theta):
        raise DomainError(f"cannot wrap non-finite angle {theta}")
    wrapped = theta - TWO_PI * math.ceil((theta - math.pi) / TWO_PI)
    # guard against rounding pushing the result just outside the interval
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    elif wrapped > math.pi:
        wrapped -= TWO_PI
    return wrapped


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle`."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise DomainError("cannot wrap non-finite angles")
    wrapped = theta - TWO_PI * np.ceil((theta - math.pi) / TWO_PI)
    wrapped = np.where(wrapped <= -math.pi, wrapped + TWO_PI, wrapped)
    return np.where(wrapped > math.pi, wrapped - TWO_PI, wrapped)


def tb1_rates(phi: float) -> np.ndarray:
    """Compass rates ``0.5 * (1 + sin(phi + j*pi/2))`` for j = 0..3.

    Opposing cells are computed as exact complements so that
    ``r[0] + r[2] == 1`` and ``r[1] + r[3] == 1`` hold bit-exactly.
    """
    r0 = 0.5 * (1.0 + math.sin(phi))
    r1 = 0.5 * (1.0 + math.sin(phi + 0.5 * math.pi))
    return np.array([r0, r1, 1.0 - r0, 1.0 - r1])


def _clamp01(value: float) -> float:
    return min(max(value, 0.0), 1.0)


def tn_rates_holonomic(
    v_mag: float, theta: float, phi: float, dphi: float, params: WorldParams
) -> tuple[float, float]:
    """Optic-flow rates for flight direction ``theta`` differing from heading ``phi``.

    ``r_L = -v sin(theta - phi + phi_tn) + rho dphi`` and
    ``r_R = +v sin(theta - phi - phi_tn) - rho dphi``, both clamped to [0, 1].
    """
    rel = theta - phi
    r_l = -v_mag * math.sin(rel + params.phi_tn) + params.rho * dphi
    r_r = v_mag * math.sin(rel - params.phi_tn) - params.rho * dphi
    return _clamp01(r_l), _clamp01(r_r)


def tn_rates(v_mag: float, dphi: float, params: WorldParams) -> tuple[float, float]:
    """Closed-loop optic-flow rates, ``v sin(phi_tn) +/- rho dphi`` clamped to [0, 1]."""
    base = v_mag * math.sin(params.phi_tn)
    return _clamp01(base + params.rho * dphi), _clamp01(base - params.rho * dphi)


def sense(state: AgentState, params: WorldParams) -> SensorRates:
    """Sensor rates seen by the network at the current state."""
    dphi = wrap_angle(state.phi - state.phi_prev)
    tn_l, tn_r = tn_rates(state.speed, dphi, params)
    return SensorRates(tb1=tb1_rates(state.phi), tn_l=tn_l, tn_r=tn_r)


def integrate_position(state: AgentState, params: WorldParams) -> AgentState:
    """Advance one update along ``theta`` and bump the step counter."""
    step = params.v_max * state.speed
    return replace(
        state,
        x=state.x + step * math.cos(state.theta),
        y=state.y + step * math.sin(state.theta),
        step_index=state.step_index + 1,
    )


def steer(state: AgentState, dphi: float, speed: float, params: WorldParams) -> AgentState:
    """Turn by ``dphi``, set the speed and advance one update along the new heading."""
    phi = wrap_angle(state.phi + dphi)
    turned = replace(state, phi_prev=state.phi, phi=phi, theta=phi, speed=speed)
    return integrate_position(turned, params)


def step_outbound(state: AgentState, rng: np.random.Generator, params: WorldParams) -> AgentState:
    """One update of the forced random walk."""
    delta = rng.normal(0.0, params.sigma_walk) if params.sigma_walk > 0 else 0.0
    return steer(state, delta, params.outbound_speed, params)


def motor_turn(r_ml: float, r_mr: float, params: WorldParams) -> float:
    """Heading change commanded by the two motor rates."""
    return params.mu * (r_ml - r_mr)


def apply_motor(state: AgentState, r_ml: float, r_mr: float, params: WorldParams) -> AgentState:
    """Steer by the motor-rate difference and advance at constant speed."""
    if not (0.0 <= r_ml <= 1.0 and 0.0 <= r_mr <= 1.0):
        raise DomainError(f"motor rates must lie in [0, 1], got ({r_ml}, {r_mr})")
    return steer(state, motor_turn(r_ml, r_mr, params), state.speed, params)
