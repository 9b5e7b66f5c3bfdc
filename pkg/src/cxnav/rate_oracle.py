"""Rate-based model of the path-integration network.

Serves as the analytic reference for the spiking network and as the fast
simulation mode used by the evolution strategy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .agent_world import AgentState, WorldParams, apply_motor, sense, step_outbound, wrap_angle
from .config import ConfigError, JourneyConfig
from .genome import Genome
from .trajectory import Trajectory, from_arrays

W_SUP_MAX = 1008.0
BASELINE = 504.0
COUNTS_PER_WINDOW = 10.0

# transfer families: clip(0.5 + u, 0, 1) and logistic(u), u = gain*(a*x - b) - theta
LINEAR, LOGISTIC = 0, 1

# preferred direction of compass column j
PREFERRED = np.pi / 2 - np.arange(4) * np.pi / 2


@dataclass(frozen=True)
class RateNeuronParams:
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self) -> None:
        if not self.a > 0:
            raise ValueError(f"logistic slope must be positive, got {self.a}")


def logistic_response(current: float, params: RateNeuronParams) -> float:
    """``1 / (1 + exp(-(a*I - b)))``, increasing in the input."""
    if not math.isfinite(current):
        raise ValueError("input current must be finite")
    z = params.a * current - params.b
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def synaptic_input(weights, rates) -> float:
    w = np.asarray(weights, dtype=float)
    r = np.asarray(rates, dtype=float)
    if w.shape != r.shape:
        raise ValueError(f"weights {w.shape} and rates {r.shape} differ in shape")
    return float(np.dot(w, r))


def cpu4_state_update(i_prev: float, c_tn: float, c_tb1: float, h: float, k: float) -> float:
    """One integrator step on spike counts per update window."""
    return min(max(i_prev + h * (c_tn - c_tb1 - k), 0.0), W_SUP_MAX)


@dataclass(frozen=True)
class Topology:
    """Index rotations of the CPU1 afferents.

    ``tb1_offset_left`` / ``tb1_offset_right`` select the compass column
    ``(j + offset) mod 4`` that inhibits CPU1 cell ``j``. With
    ``inhibition_same_hemisphere`` the 180-degree rotated CPU4 inhibition
    comes from the cell's own hemisphere, otherwise from the opposite one.
    """

    tb1_offset_left: int = -1
    tb1_offset_right: int = 1
    inhibition_same_hemisphere: bool = True

    def tb1_source(self, hemi: int, j: int) -> int:
        off = self.tb1_offset_left if hemi == 0 else self.tb1_offset_right
        return (j + off) % 4

    def inhibitory_source(self, hemi: int, j: int) -> int:
        """CPU4 index (0-7) inhibiting CPU1 cell ``4*hemi + j``."""
        src_hemi = hemi if self.inhibition_same_hemisphere else 1 - hemi
        return 4 * src_hemi + (j + 2) % 4

    def index_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        tb1 = np.array([self.tb1_source(c // 4, c % 4) for c in range(8)], dtype=np.int64)
        inh = np.array([self.inhibitory_source(c // 4, c % 4) for c in range(8)], dtype=np.int64)
        return tb1, inh


@dataclass(frozen=True)
class PopulationParams:
    """Per-neuron transfer ``f(gain*(a*x - b) - theta)`` of one population."""

    a: np.ndarray
    b: np.ndarray
    gain: np.ndarray
    theta: np.ndarray
    family: int

    def __post_init__(self) -> None:
        n = len(self.a)
        for name in ("a", "b", "gain", "theta"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have {n} entries")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def uniform(cls, n: int, a: float, b: float, family: int) -> PopulationParams:
        return cls(np.full(n, a), np.full(n, b), np.ones(n), np.zeros(n), family)

    def response(self, x) -> np.ndarray:
        u = self.gain * (self.a * np.asarray(x, dtype=float) - self.b) - self.theta
        if self.family == LINEAR:
            return np.clip(0.5 + u, 0.0, 1.0)
        return 0.5 * (1.0 + np.tanh(0.5 * u))


# nominal CPU1 transfer: minimax fit of the logistic to r_exc * (1 - r_inh)
CPU1_A = 3.0
CPU1_B = 1.45


@dataclass(frozen=True)
class NetworkParams:
    cpu4: PopulationParams
    cpu1: PopulationParams
    motor: PopulationParams
    topology: Topology = field(default_factory=Topology)

    @classmethod
    def ideal(cls, cpu1_a: float = CPU1_A, cpu1_b: float = CPU1_B, topology: Topology | None = None) -> NetworkParams:
        """Noise-free populations: CPU4 and motor rates proportional to their input."""
        return cls(
            cpu4=PopulationParams.uniform(8, 1.0 / W_SUP_MAX, 0.5, LINEAR),
            cpu1=PopulationParams.uniform(8, cpu1_a, cpu1_b, LOGISTIC),
            motor=PopulationParams.uniform(2, 1.0, 0.5, LINEAR),
            topology=topology or Topology(),
        )

    def with_topology(self, topology: Topology) -> NetworkParams:
        return replace(self, topology=topology)


@dataclass
class RateNetworkState:
    cpu4_state: np.ndarray = field(default_factory=lambda: np.full(8, BASELINE))
    cpu4_rates: np.ndarray = field(default_factory=lambda: np.full(8, 0.5))
    cpu1_rates: np.ndarray = field(default_factory=lambda: np.zeros(8))
    motor_rates: np.ndarray = field(default_factory=lambda: np.zeros(2))


def cpu1_drive(cpu4_rates, tb1, genome: Genome, topology: Topology) -> np.ndarray:
    r4 = np.asarray(cpu4_rates, dtype=float)
    tb1 = np.asarray(tb1, dtype=float)
    tb1_idx, inh_idx = topology.index_arrays()
    return (
        genome.cpu4_to_cpu1_exc * r4
        - genome.cpu4_to_cpu1_inh * r4[inh_idx]
        - genome.tb1_to_cpu1 * tb1[tb1_idx]
    )


def cpu1_rates(cpu4_rates, tb1, genome: Genome, params: NetworkParams) -> np.ndarray:
    """Steering-cell rates from the stored home vector and the current heading."""
    return params.cpu1.response(cpu1_drive(cpu4_rates, tb1, genome, params.topology))


def motor_drive(cpu1: np.ndarray, genome: Genome) -> np.ndarray:
    c1 = np.asarray(cpu1, dtype=float)
    return genome.cpu1_to_m * np.array([c1[:4].mean(), c1[4:].mean()])


def motor_rates(cpu1: np.ndarray, genome: Genome, params: NetworkParams | None = None) -> tuple[float, float]:
    """Left and right motor rates: weighted hemisphere means through the motor transfer."""
    drive = motor_drive(cpu1, genome)
    if params is not None:
        drive = params.motor.response(drive)
    return float(drive[0]), float(drive[1])


def decode_home_vector(cpu4_state, baseline: float = BASELINE) -> np.ndarray:
    """Population vector of the accumulators relative to baseline, both hemispheres summed."""
    s = np.asarray(cpu4_state, dtype=float).reshape(2, 4) - baseline
    per_dir = s.sum(axis=0)
    return np.array([np.dot(per_dir, np.cos(PREFERRED)), np.dot(per_dir, np.sin(PREFERRED))])


@dataclass
class RateLog:
    cpu4_state: np.ndarray
    motor_rates: np.ndarray

    @property
    def final_cpu4(self) -> np.ndarray:
        return self.cpu4_state[-1]


def outbound_noise(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    """Heading increments of the forced walk, drawn exactly as ``step_outbound`` draws them."""
    if sigma <= 0:
        return np.zeros(n)
    return rng.normal(0.0, sigma, n)


def sensor_counts(state: AgentState, world: WorldParams) -> tuple[np.ndarray, np.ndarray]:
    """Compass and optic-flow rates as counts per update window (real-valued)."""
    s = sense(state, world)
    return COUNTS_PER_WINDOW * s.tb1, COUNTS_PER_WINDOW * np.array([s.tn_l, s.tn_r])


def network_step(net: RateNetworkState, state: AgentState, genome: Genome, params: NetworkParams,
                 world: WorldParams, h: float, k: float) -> RateNetworkState:
    """Read out the network from the stored state, then integrate the current sensor counts."""
    s = sense(state, world)
    r4 = params.cpu4.response(net.cpu4_state)
    c1 = cpu1_rates(r4, s.tb1, genome, params)
    m = np.array(motor_rates(c1, genome, params))
    c_tb1, c_tn = COUNTS_PER_WINDOW * s.tb1, COUNTS_PER_WINDOW * np.array([s.tn_l, s.tn_r])
    new_state = np.array([
        cpu4_state_update(net.cpu4_state[4 * hemi + j], c_tn[hemi], c_tb1[j], h, k)
        for hemi in range(2) for j in range(4)
    ])
    return RateNetworkState(new_state, r4, c1, m)


def run_rate_journey_reference(config: JourneyConfig, genome: Genome, params: NetworkParams,
                               rng: np.random.Generator, initial_heading: float = 0.0) -> tuple[Trajectory, RateLog]:
    """Step-by-step journey built from the single-step functions (slow, used as a cross-check)."""
    world = config.world
    state = AgentState(phi=wrap_angle(initial_heading), phi_prev=wrap_angle(initial_heading),
                       theta=wrap_angle(initial_heading), speed=world.outbound_speed)
    net = RateNetworkState()
    n = config.n_updates
    out = np.zeros((n, 3))
    log4 = np.zeros((n, 8))
    logm = np.zeros((n, 2))
    for t in range(n):
        net = network_step(net, state, genome, params, world, config.h, config.k)
        if t < config.n_return:
            state = step_outbound(state, rng, world)
        else:
            state = apply_motor(state, net.motor_rates[0], net.motor_rates[1], world)
        out[t] = state.x, state.y, state.phi
        log4[t] = net.cpu4_state
        logm[t] = net.motor_rates
    return from_arrays(out, config.n_return, config.dt_update, {"mode": "rate"}), RateLog(log4, logm)


@numba.njit(cache=True, inline="always")
def _wrap(a):
    w = a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))
    if w <= -np.pi:
        w += 2.0 * np.pi
    elif w > np.pi:
        w -= 2.0 * np.pi
    return w


@numba.njit(cache=True, inline="always")
def _transfer(x, a, b, g, th, family):
    u = g * (a * x - b) - th
    if family == 0:
        return min(max(0.5 + u, 0.0), 1.0)
    return 0.5 * (1.0 + np.tanh(0.5 * u))


@numba.njit(cache=True)
def _journey_kernel(noise, n_updates, n_return, phi0, speed, v_max, mu, rho, phi_tn, h, k,
                    p4, f4, p1, f1, pm, fm, w_tb1, w_exc, w_inh, w_m, tb1_idx, inh_idx,
                    out, log4, logm):
    # p4, p1, pm: rows a, b, gain, theta
    state = np.full(8, 504.0)
    r4 = np.empty(8)
    c1 = np.empty(8)
    tb1 = np.empty(4)
    x = 0.0
    y = 0.0
    phi = phi0
    phi_prev = phi0
    sin_tn = np.sin(phi_tn)
    for t in range(n_updates):
        r0 = 0.5 * (1.0 + np.sin(phi))
        r1 = 0.5 * (1.0 + np.sin(phi + 0.5 * np.pi))
        tb1[0] = r0
        tb1[1] = r1
        tb1[2] = 1.0 - r0
        tb1[3] = 1.0 - r1
        dphi = _wrap(phi - phi_prev)
        tn_l = min(max(speed * sin_tn + rho * dphi, 0.0), 1.0)
        tn_r = min(max(speed * sin_tn - rho * dphi, 0.0), 1.0)
        for i in range(8):
            r4[i] = _transfer(state[i], p4[0, i], p4[1, i], p4[2, i], p4[3, i], f4)
        for i in range(8):
            drive = w_exc[i] * r4[i] - w_inh[i] * r4[inh_idx[i]] - w_tb1[i] * tb1[tb1_idx[i]]
            c1[i] = _transfer(drive, p1[0, i], p1[1, i], p1[2, i], p1[3, i], f1)
        m_l = _transfer(w_m[0] * 0.25 * (c1[0] + c1[1] + c1[2] + c1[3]), pm[0, 0], pm[1, 0], pm[2, 0], pm[3, 0], fm)
        m_r = _transfer(w_m[1] * 0.25 * (c1[4] + c1[5] + c1[6] + c1[7]), pm[0, 1], pm[1, 1], pm[2, 1], pm[3, 1], fm)
        for hemi in range(2):
            c_tn = 10.0 * (tn_l if hemi == 0 else tn_r)
            for j in range(4):
                i = 4 * hemi + j
                s = state[i] + h * (c_tn - 10.0 * tb1[j] - k)
                state[i] = min(max(s, 0.0), 1008.0)
        phi_prev = phi
        if t < n_return:
            phi = _wrap(phi + noise[t])
        else:
            phi = _wrap(phi + mu * (m_l - m_r))
        x += v_max * speed * np.cos(phi)
        y += v_max * speed * np.sin(phi)
        out[t, 0] = x
        out[t, 1] = y
        out[t, 2] = phi
        for i in range(8):
            log4[t, i] = state[i]
        logm[t, 0] = m_l
        logm[t, 1] = m_r


def _pop_matrix(pop: PopulationParams) -> np.ndarray:
    return np.ascontiguousarray(np.stack([pop.a, pop.b, pop.gain, pop.theta]))


@dataclass(frozen=True)
class _PackedNetwork:
    """Arrays handed to the compiled kernel, built once per (genome, params) pair."""

    args: tuple

    @classmethod
    def build(cls, genome: Genome, params: NetworkParams) -> _PackedNetwork:
        g = genome.clamped()
        tb1_idx, inh_idx = params.topology.index_arrays()
        return cls((
            _pop_matrix(params.cpu4), params.cpu4.family,
            _pop_matrix(params.cpu1), params.cpu1.family,
            _pop_matrix(params.motor), params.motor.family,
            g.tb1_to_cpu1.copy(), g.cpu4_to_cpu1_exc.copy(), g.cpu4_to_cpu1_inh.copy(), g.cpu1_to_m.copy(),
            tb1_idx, inh_idx,
        ))


def simulate_rate(config: JourneyConfig, packed: _PackedNetwork, noise: np.ndarray,
                  initial_heading: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run the compiled journey; returns (x, y, phi) rows, CPU4 states and motor rates."""
    n = config.n_updates
    if len(noise) < config.n_return:
        raise ConfigError("not enough outbound noise samples")
    w = config.world
    out = np.empty((n, 3))
    log4 = np.empty((n, 8))
    logm = np.empty((n, 2))
    _journey_kernel(np.ascontiguousarray(noise, dtype=float), n, config.n_return, wrap_angle(initial_heading),
                    w.outbound_speed, w.v_max, w.mu, w.rho, w.phi_tn, config.h, config.k,
                    *packed.args, out, log4, logm)
    return out, log4, logm


def run_rate_journey(config: JourneyConfig, genome: Genome, rng: np.random.Generator,
                     params: NetworkParams | None = None,
                     initial_heading: float = 0.0) -> tuple[Trajectory, RateLog]:
    """Full journey in rate mode: forced walk until ``t_return``, then closed-loop homing."""
    if config.mode != "rate":
        config = replace(config, mode="rate")
    params = params or NetworkParams.ideal()
    noise = outbound_noise(rng, config.n_return, config.world.sigma_walk)
    out, log4, logm = simulate_rate(config, _PackedNetwork.build(genome, params), noise, initial_heading)
    meta = {"mode": "rate", "seed": config.seed, "genome": genome.digest()}
    return from_arrays(out, config.n_return, config.dt_update, meta), RateLog(log4, logm)
