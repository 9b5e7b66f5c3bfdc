"""Clock-driven spiking network with quantized supersynapses.

Neuron ids: 0-7 CPU4 (left 0-3, right 4-7), 8-15 CPU1 (same order),
16-17 motor (left, right). Source ids: 0-3 TB1, 4-5 TN (left, right),
6-13 background, one per CPU4 cell. Spike records give sources the ids
``18 + source``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .agent_world import AgentState, apply_motor, sense, steer, wrap_angle
from .config import JourneyConfig, ScheduleConfig
from .genome import LSB_PER_UNIT, Genome, GenomeError
from .rate_oracle import BASELINE, W_SUP_MAX, Topology, outbound_noise
from .trajectory import FidelityRecorder, Trajectory, from_arrays

N_NEURONS = 18
CPU4_IDS = tuple(range(0, 8))
CPU1_IDS = tuple(range(8, 16))
MOTOR_IDS = (16, 17)
TB1_SRC = tuple(range(0, 4))
TN_SRC = (4, 5)
BG_SRC = tuple(range(6, 14))
N_SOURCES = 14
SOURCE_ID_OFFSET = N_NEURONS

N_SUB = 16
SUB_MAX = 63


def population_of(neuron_id: int) -> str:
    if neuron_id < 8:
        return "CPU4"
    if neuron_id < 16:
        return "CPU1"
    if neuron_id < N_NEURONS:
        return "M"
    src = neuron_id - SOURCE_ID_OFFSET
    if src < 4:
        return "TB1"
    if src < 6:
        return "TN"
    return "BG"


@dataclass(frozen=True)
class LifParams:
    """Leaky integrate-and-fire constants; voltages in units of the threshold swing."""

    c_m: float = 1.0
    g_l: float = 0.1
    v_l: float = 0.0
    v_th: float = 1.0
    v_reset: float = 0.0
    tau_syn: float = 5.0
    t_ref: float = 1.0

    def __post_init__(self) -> None:
        if not self.v_reset < self.v_th:
            raise ValueError("v_reset must lie below v_th")
        if min(self.c_m, self.g_l, self.tau_syn) <= 0:
            raise ValueError("c_m, g_l and tau_syn must be positive")
        if self.t_ref < 0:
            raise ValueError("t_ref must be non-negative")

    @property
    def tau_m(self) -> float:
        return self.c_m / self.g_l


# CPU4 and motor cells act as near-perfect integrators of their input charge;
# CPU1 cells sit above threshold (tonic firing) and are modulated by their inputs.
CPU4_LIF = LifParams(g_l=1.0 / 1000.0, tau_syn=5.0, t_ref=0.0)
CPU1_LIF = LifParams(g_l=1.0 / 50.0, v_l=1.5, tau_syn=20.0, t_ref=0.0)
MOTOR_LIF = LifParams(g_l=1.0 / 1000.0, tau_syn=10.0, t_ref=0.0)

# charge (threshold swings) delivered per spike and weight LSB
CPU4_CHARGE = 1.0 / W_SUP_MAX
CPU1_CHARGE = 1.0 / LSB_PER_UNIT
MOTOR_CHARGE = 1.0 / (4 * LSB_PER_UNIT)


@dataclass
class NeuronState:
    v_m: float = 0.0
    i_syn_exc: float = 0.0
    i_syn_inh: float = 0.0
    spike_count: int = 0
    refractory_until: float = -math.inf

    def read_counter(self) -> int:
        count, self.spike_count = self.spike_count, 0
        return count


def lif_step(state: NeuronState, params: LifParams, dt: float, input_events=(0.0, 0.0),
             t: float = 0.0) -> tuple[NeuronState, bool]:
    """Advance one neuron by ``dt`` with exponential-Euler integration.

    ``input_events`` holds the excitatory and inhibitory current jumps that
    arrive at the start of the step. ``t`` is the time at the start of the step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    exc = (state.i_syn_exc + input_events[0]) * math.exp(-dt / params.tau_syn)
    inh = (state.i_syn_inh + input_events[1]) * math.exp(-dt / params.tau_syn)
    new = replace(state, i_syn_exc=exc, i_syn_inh=inh)
    if t < state.refractory_until:
        return new, False
    v_inf = params.v_l + (exc - inh) / params.g_l
    new.v_m = v_inf + (state.v_m - v_inf) * math.exp(-dt * params.g_l / params.c_m)
    if new.v_m >= params.v_th:
        new.v_m = params.v_reset
        new.spike_count += 1
        new.refractory_until = t + dt + params.t_ref
        return new, True
    return new, False


@dataclass(frozen=True)
class Synapse:
    """One row of the connection table.

    ``weight`` is the 6-bit code, or ``None`` for the supersynapses and the
    modulatory links that only drive weight updates. ``gene`` indexes the
    genome entry setting this weight (-1 when not evolvable).
    """

    source: str
    target: int
    sign: int
    weight: int | None
    kind: str
    gene: int = -1
    synapse_id: int = -1


def deliver_spike(synapse: Synapse, target: NeuronState, charge_per_lsb: float, params: LifParams) -> NeuronState:
    """Apply the current jump of one presynaptic spike."""
    if synapse.weight is None:
        raise ValueError("modulatory links carry no current")
    jump = charge_per_lsb * synapse.weight / params.tau_syn
    if synapse.sign > 0:
        return replace(target, i_syn_exc=target.i_syn_exc + jump)
    if synapse.sign < 0:
        return replace(target, i_syn_inh=target.i_syn_inh + jump)
    return target


@dataclass
class Supersynapse:
    """Sixteen ganged 6-bit synapses plus a sub-LSB residual."""

    sub_weights: np.ndarray = field(default_factory=lambda: np.zeros(N_SUB, dtype=np.int64))
    residual: float = 0.0
    sign: int = 1
    _total: int = field(default=-1, repr=False)

    @property
    def total(self) -> int:
        if self._total < 0:
            self._total = int(self.sub_weights.sum())
        return self._total

    @classmethod
    def with_total(cls, total: int) -> Supersynapse:
        s = cls()
        supersynapse_write(s, total)
        return s


_BALANCED = [np.array([q + (i < r) for i in range(N_SUB)], dtype=np.int64)
             for q, r in (divmod(t, N_SUB) for t in range(int(W_SUP_MAX) + 1))]


def supersynapse_write(s: Supersynapse, total: int) -> bool:
    """Spread ``total`` evenly over the sub-synapses; returns True when it had to be clamped."""
    clamped = min(max(int(total), 0), int(W_SUP_MAX))
    s.sub_weights = _BALANCED[clamped].copy()
    s._total = clamped
    return clamped != total


def cpu4_weight_update(s: Supersynapse, c_tn: float, c_tb1: float, h: float, k: float) -> None:
    """Integrate one window of counts into the supersynapse, carrying the fraction."""
    target = s.total + s.residual + h * (c_tn - c_tb1 - k)
    target = min(max(target, 0.0), W_SUP_MAX)
    whole = math.floor(target)
    supersynapse_write(s, whole)
    s.residual = target - whole


def periodic_counts(rates, slots: int = 10) -> np.ndarray:
    """Spikes per window of periodic sources: ``round(slots * rate)``, halves rounded up."""
    return np.floor(np.clip(np.asarray(rates, dtype=float), 0.0, 1.0) * slots + 0.5).astype(np.int64)


def periodic_fires(rate, slots: int = 10) -> np.ndarray:
    """Slots in which periodic sources spike, evenly spaced.

    Slot ``m`` fires when the phase accumulator ``m * n / slots`` crosses an
    integer. A scalar rate gives one row, an array of rates one row each.
    """
    n = periodic_counts(rate, slots)
    m = np.arange(slots)
    fire = ((m + 1) * n[..., None]) // slots > (m * n[..., None]) // slots
    return fire


def spike_source_tick(rate: float, slot: int, mode: str = "periodic", rng: np.random.Generator | None = None,
                      slots: int = 10) -> bool:
    """Whether a source emits in ``slot`` of the current window."""
    if mode == "periodic":
        return bool(periodic_fires(rate, slots)[slot])
    if mode == "poisson":
        if rng is None:
            raise ValueError("poisson sources need a random generator")
        return bool(rng.random() < min(max(rate, 0.0), 1.0))
    raise ValueError(f"unknown source mode {mode!r}")


@dataclass(frozen=True)
class SpikingNeuronTable:
    """Per-neuron LIF constants and afferent charge scale for all 18 neurons."""

    lif: tuple
    charge_per_lsb: np.ndarray

    def __post_init__(self) -> None:
        if len(self.lif) != N_NEURONS or len(self.charge_per_lsb) != N_NEURONS:
            raise ValueError(f"need {N_NEURONS} neuron entries")

    @classmethod
    def nominal(cls) -> SpikingNeuronTable:
        lif = (CPU4_LIF,) * 8 + (CPU1_LIF,) * 8 + (MOTOR_LIF,) * 2
        charge = np.array([CPU4_CHARGE] * 8 + [CPU1_CHARGE] * 8 + [MOTOR_CHARGE] * 2)
        return cls(lif, charge)


def _as_neuron_table(cal) -> SpikingNeuronTable:
    if cal is None:
        return SpikingNeuronTable.nominal()
    if isinstance(cal, SpikingNeuronTable):
        return cal
    return cal.spiking_table()


@dataclass(frozen=True)
class Connectome:
    synapses: tuple
    populations: dict
    background: tuple
    neurons: SpikingNeuronTable
    topology: Topology

    def rows(self, kind: str) -> list[Synapse]:
        return [s for s in self.synapses if s.kind == kind]

    def matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Current jumps per spike: source->neuron (exc, inh) and neuron->neuron (exc, inh)."""
        src_e = np.zeros((N_SOURCES, N_NEURONS))
        src_i = np.zeros((N_SOURCES, N_NEURONS))
        nn_e = np.zeros((N_NEURONS, N_NEURONS))
        nn_i = np.zeros((N_NEURONS, N_NEURONS))
        for s in self.synapses:
            if s.weight is None or s.sign == 0:
                continue
            lif = self.neurons.lif[s.target]
            jump = self.neurons.charge_per_lsb[s.target] * s.weight / lif.tau_syn
            kind, idx = _parse_endpoint(s.source)
            if kind == "src":
                (src_e if s.sign > 0 else src_i)[idx, s.target] += jump
            else:
                (nn_e if s.sign > 0 else nn_i)[idx, s.target] += jump
        return src_e, src_i, nn_e, nn_i


def _parse_endpoint(name: str) -> tuple[str, int]:
    kind, idx = name.split(":")
    return ("src" if kind in ("TB1", "TN", "BG") else "neuron"), _ENDPOINTS[name]


_ENDPOINTS = {
    **{f"TB1:{j}": TB1_SRC[j] for j in range(4)},
    "TN:L": TN_SRC[0], "TN:R": TN_SRC[1],
    **{f"BG:{i}": BG_SRC[i] for i in range(8)},
    **{f"CPU4:{i}": CPU4_IDS[i] for i in range(8)},
    **{f"CPU1:{i}": CPU1_IDS[i] for i in range(8)},
    "M:L": MOTOR_IDS[0], "M:R": MOTOR_IDS[1],
}


def build_network(genome: Genome, cal=None, topology: Topology | None = None) -> Connectome:
    """Connection table of the path-integration circuit for ``genome``."""
    if not isinstance(genome, Genome):
        raise GenomeError("build_network needs a Genome")
    topology = topology or Topology()
    codes = genome.quantized()
    rows: list[Synapse] = []
    for i in range(8):
        hemi, j = divmod(i, 4)
        rows.append(Synapse(f"BG:{i}", CPU4_IDS[i], 1, None, "supersynapse", synapse_id=i))
        rows.append(Synapse("TN:L" if hemi == 0 else "TN:R", CPU4_IDS[i], 1, None, "facilitation"))
        rows.append(Synapse(f"TB1:{j}", CPU4_IDS[i], -1, None, "depression"))
    for c in range(8):
        hemi, j = divmod(c, 4)
        target = CPU1_IDS[c]
        rows.append(Synapse(f"CPU4:{c}", target, 1, int(codes[8 + c]), "cpu4_exc", gene=8 + c))
        rows.append(Synapse(f"CPU4:{topology.inhibitory_source(hemi, j)}", target, -1, int(codes[16 + c]),
                            "cpu4_inh", gene=16 + c))
        rows.append(Synapse(f"TB1:{topology.tb1_source(hemi, j)}", target, -1, int(codes[c]), "tb1_inh", gene=c))
    for c in range(8):
        hemi = c // 4
        rows.append(Synapse(f"CPU1:{c}", MOTOR_IDS[hemi], 1, int(codes[24 + hemi]), "motor", gene=24 + hemi,
                            synapse_id=100 + hemi))
    populations = {"TB1": TB1_SRC, "TN": TN_SRC, "BG": BG_SRC, "CPU4": CPU4_IDS, "CPU1": CPU1_IDS, "M": MOTOR_IDS}
    return Connectome(tuple(rows), populations, BG_SRC, _as_neuron_table(cal), topology)


def extract_genome(connectome: Connectome) -> Genome:
    """Genome encoded in the evolvable synapses of ``connectome``."""
    vec = np.full(26, np.nan)
    for s in connectome.synapses:
        if s.gene >= 0:
            vec[s.gene] = s.weight / LSB_PER_UNIT
    if np.isnan(vec).any():
        raise GenomeError("connectome lacks some evolvable synapses")
    return Genome.from_vector(vec)


@numba.njit(cache=True)
def _run_window(v, ie, ii, ref, pending, fire, offset, src_e, src_i, nn_e, nn_i,
                decay_m, decay_s, v_inf_gain, v_l, v_th, v_reset, t_ref,
                dt, steps_per_slot, counts, spike_step, spike_id, record):
    """Simulate one update window; returns the number of recorded spikes."""
    nn = v.shape[0]
    ns = fire.shape[0]
    n_slots = fire.shape[1]
    n_rec = 0
    for s in range(n_slots * steps_per_slot):
        m = s // steps_per_slot
        o = s - m * steps_per_slot
        for k in range(ns):
            if fire[k, m] and offset[k, m] == o:
                for t in range(nn):
                    ie[t] += src_e[k, t]
                    ii[t] += src_i[k, t]
        for p in range(nn):
            if pending[p]:
                for t in range(nn):
                    ie[t] += nn_e[p, t]
                    ii[t] += nn_i[p, t]
                pending[p] = False
        for t in range(nn):
            ie[t] *= decay_s[t]
            ii[t] *= decay_s[t]
            if ref[t] > 0.0:
                ref[t] -= dt
                continue
            vinf = v_l[t] + (ie[t] - ii[t]) * v_inf_gain[t]
            v[t] = vinf + (v[t] - vinf) * decay_m[t]
            if v[t] >= v_th[t]:
                v[t] = v_reset[t]
                ref[t] = t_ref[t]
                counts[t] += 1
                pending[t] = True
                if record:
                    spike_step[n_rec] = s
                    spike_id[n_rec] = t
                    n_rec += 1
    return n_rec


@dataclass
class SpikeRecord:
    t_ms: np.ndarray
    neuron_id: np.ndarray

    @property
    def population(self) -> list[str]:
        return [population_of(int(i)) for i in self.neuron_id]

    def __len__(self) -> int:
        return len(self.t_ms)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpikeRecord):
            return NotImplemented
        return np.array_equal(self.t_ms, other.t_ms) and np.array_equal(self.neuron_id, other.neuron_id)

    def of_population(self, name: str) -> SpikeRecord:
        mask = np.array([p == name for p in self.population], dtype=bool)
        return SpikeRecord(self.t_ms[mask], self.neuron_id[mask])


@dataclass
class SourceSettings:
    """How the virtual sources emit: periodic or Poisson, optional jitter within a slot."""

    mode: str = "periodic"
    jitter: bool = False
    background_rate: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("periodic", "poisson"):
            raise ValueError(f"unknown source mode {self.mode!r}")


class SpikingSimulation:
    """One closed-loop run of the spiking network, advanced cycle by cycle."""

    def __init__(self, config: JourneyConfig, genome: Genome, cal=None, rng: np.random.Generator | None = None,
                 sources: SourceSettings | None = None, record_spikes: bool = True,
                 record_sources: bool = False, topology: Topology | None = None, initial_heading: float = 0.0):
        self.config = config
        self.schedule: ScheduleConfig = config.schedule
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.sources = sources or SourceSettings()
        self.connectome = build_network(genome, cal, topology)
        self.record_spikes = record_spikes
        self.record_sources = record_sources
        self.noise = outbound_noise(self.rng, config.n_return, config.world.sigma_walk)
        self.source_override: np.ndarray | None = None

        nt = self.connectome.neurons
        sched = self.schedule
        dt = sched.dt_neuron
        self.dt = dt
        self.decay_m = np.array([math.exp(-dt * p.g_l / p.c_m) for p in nt.lif])
        self.decay_s = np.array([math.exp(-dt / p.tau_syn) for p in nt.lif])
        self.v_inf_gain = np.array([1.0 / p.g_l for p in nt.lif])
        self.v_l = np.array([p.v_l for p in nt.lif])
        self.v_th = np.array([p.v_th for p in nt.lif])
        self.v_reset = np.array([p.v_reset for p in nt.lif])
        self.t_ref = np.array([p.t_ref for p in nt.lif])
        self.src_e, self.src_i, self.nn_e, self.nn_i = self.connectome.matrices()
        self.bg_jump = np.array([nt.charge_per_lsb[i] / nt.lif[i].tau_syn for i in CPU4_IDS])

        self.v = self.v_reset.copy()
        self.ie = np.zeros(N_NEURONS)
        self.ii = np.zeros(N_NEURONS)
        self.ref = np.zeros(N_NEURONS)
        self.pending = np.zeros(N_NEURONS, dtype=np.bool_)
        self.counts = np.zeros(N_NEURONS, dtype=np.int64)
        n_steps = sched.slots_per_update * sched.steps_per_slot
        self.spike_step = np.zeros(N_NEURONS * n_steps, dtype=np.int64)
        self.spike_id = np.zeros(N_NEURONS * n_steps, dtype=np.int64)
        self._spike_t: list[np.ndarray] = []
        self._spike_n: list[np.ndarray] = []

        self.supersynapses = [Supersynapse.with_total(int(BASELINE)) for _ in CPU4_IDS]
        phi0 = wrap_angle(initial_heading)
        self.agent = AgentState(phi=phi0, phi_prev=phi0, theta=phi0, speed=config.world.outbound_speed)
        self.cycle = 0
        self.full_log = np.zeros((config.n_updates, 3))
        self.recorder = FidelityRecorder(capacity=sched.max_records)
        self.last_counts = np.zeros(N_NEURONS, dtype=np.int64)
        self.last_source_counts = np.zeros(N_SOURCES, dtype=np.int64)
        self.cpu4_totals = np.zeros((config.n_updates, 8), dtype=np.int64)
        self.cpu4_counts = np.zeros((config.n_updates, 8), dtype=np.int64)
        self.motor_log = np.zeros((config.n_updates, 2))

    # subcycle 1: sensor rates for the window from the current agent state
    def _source_table(self) -> tuple[np.ndarray, np.ndarray]:
        slots = self.schedule.slots_per_update
        if self.source_override is not None:
            rates = np.asarray(self.source_override, dtype=float)
        else:
            s = sense(self.agent, self.config.world)
            rates = np.concatenate([s.tb1, [s.tn_l, s.tn_r], np.full(8, self.sources.background_rate)])
        if self.sources.mode == "periodic":
            fire = periodic_fires(rates, slots)
        else:
            fire = self.rng.random((N_SOURCES, slots)) < np.clip(rates, 0.0, 1.0)[:, None]
        if self.sources.jitter:
            offset = self.rng.integers(0, self.schedule.steps_per_slot, size=fire.shape)
        else:
            offset = np.zeros(fire.shape, dtype=np.int64)
        return fire, offset.astype(np.int64)

    def _dispatch(self, fire: np.ndarray, offset: np.ndarray) -> None:
        for i in CPU4_IDS:
            self.src_e[BG_SRC[i], i] = self.bg_jump[i] * self.supersynapses[i].total
        self.counts[:] = 0
        n_rec = _run_window(self.v, self.ie, self.ii, self.ref, self.pending, fire, offset,
                            self.src_e, self.src_i, self.nn_e, self.nn_i,
                            self.decay_m, self.decay_s, self.v_inf_gain, self.v_l, self.v_th, self.v_reset,
                            self.t_ref, self.dt, self.schedule.steps_per_slot, self.counts,
                            self.spike_step, self.spike_id, self.record_spikes)
        t0 = self.cycle * self.schedule.dt_update
        if self.record_spikes and n_rec:
            self._spike_t.append(t0 + self.spike_step[:n_rec] * self.dt)
            self._spike_n.append(self.spike_id[:n_rec].copy())
        if self.record_sources:
            k, m = np.nonzero(fire)
            order = np.lexsort((k, m * self.schedule.steps_per_slot + offset[k, m]))
            steps = (m * self.schedule.steps_per_slot + offset[k, m])[order]
            self._spike_t.append(t0 + steps * self.dt)
            self._spike_n.append(k[order] + SOURCE_ID_OFFSET)

    # subcycle 2: read counters and integrate the window into the memory weights
    def _integrate(self, fire: np.ndarray) -> None:
        self.last_counts = self.counts.copy()
        self.counts[:] = 0
        src_counts = fire.sum(axis=1)
        self.last_source_counts = src_counts
        for i in CPU4_IDS:
            hemi, j = divmod(i, 4)
            cpu4_weight_update(self.supersynapses[i], src_counts[TN_SRC[hemi]], src_counts[TB1_SRC[j]],
                               self.config.h, self.config.k)

    # subcycle 3: motor readout, agent step and position record
    def _act(self) -> None:
        slots = self.schedule.slots_per_update
        m_l = min(self.last_counts[MOTOR_IDS[0]] / slots, 1.0)
        m_r = min(self.last_counts[MOTOR_IDS[1]] / slots, 1.0)
        t = self.cycle
        if t < self.config.n_return:
            self.agent = steer(self.agent, self.noise[t], self.config.world.outbound_speed, self.config.world)
        else:
            self.agent = apply_motor(self.agent, m_l, m_r, self.config.world)
        a = self.agent
        self.full_log[t] = a.x, a.y, a.phi
        self.cpu4_totals[t] = [s.total for s in self.supersynapses]
        self.cpu4_counts[t] = self.last_counts[:8]
        self.motor_log[t] = m_l, m_r
        if (t + 1) % self.schedule.record_stride == 0:
            self.recorder.record(t, a.x, a.y, a.phi)

    def run_update_cycle(self) -> None:
        if self.cycle >= self.config.n_updates:
            raise RuntimeError("journey already finished")
        fire, offset = self._source_table()
        self._dispatch(fire, offset)
        self._integrate(fire)
        self._act()
        self.cycle += 1

    def spike_record(self) -> SpikeRecord:
        if not self._spike_t:
            return SpikeRecord(np.zeros(0), np.zeros(0, dtype=np.int64))
        t = np.concatenate(self._spike_t)
        n = np.concatenate(self._spike_n)
        order = np.lexsort((n, t))
        return SpikeRecord(t[order], n[order])

    def trajectory(self) -> Trajectory:
        meta = {"mode": "spiking", "seed": self.config.seed}
        if self.config.fidelity == "hardware16":
            return self.recorder.to_trajectory(self.config.n_return, self.schedule.dt_update, meta)
        return from_arrays(self.full_log[: self.cycle], self.config.n_return, self.schedule.dt_update, meta)



def run_update_cycle(sim: SpikingSimulation) -> None:
    sim.run_update_cycle()


def run_spiking_journey(config: JourneyConfig, genome: Genome, cal=None, rng: np.random.Generator | None = None,
                        **kwargs) -> tuple[Trajectory, SpikeRecord]:
    """Full closed-loop journey of the spiking network."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    sim = SpikingSimulation(config, genome, cal, rng, **kwargs)
    for _ in range(config.n_updates):
        sim.run_update_cycle()
    traj = sim.trajectory()
    traj.meta["genome"] = genome.digest()
    return traj, sim.spike_record()
