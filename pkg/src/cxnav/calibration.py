"""Per-neuron calibration of transfer curves and fixed-pattern mismatch.

Every neuron carries two tunable knobs ``(a, b)`` and a hidden mismatch
``(gain, theta)`` that calibration cannot see directly. In rate mode the
knobs are the slope and offset of the transfer function; in spiking mode
``a`` scales the afferent synaptic charge and ``b`` is the leak potential.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .genome import LSB_PER_UNIT
from .rate_oracle import LINEAR, LOGISTIC, W_SUP_MAX, NetworkParams, PopulationParams, Topology
from .spiking_core import (
    CPU1_CHARGE, CPU1_LIF, CPU4_CHARGE, CPU4_LIF, MOTOR_CHARGE, MOTOR_LIF, N_NEURONS,
    LifParams, SpikingNeuronTable, _run_window, periodic_fires,
)

SCHEMA = "cxnav.calibration/1"
POPULATIONS = ("CPU4",) * 8 + ("CPU1",) * 8 + ("M",) * 2
THRESHOLD_SCALE = 0.05
OPERATING_WEIGHT = 4.0
OPERATING_BAND = 0.125


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class NeuronCalibration:
    neuron_id: int
    population: str
    a: float
    b: float
    gain: float = 1.0
    theta: float = 0.0
    residual_max: float = math.nan
    residual_rms: float = math.nan
    residual_weighted_rms: float = math.nan
    residual_mid: float = math.nan


def nominal_knobs(mode: str, population: str) -> tuple[float, float]:
    if mode == "rate":
        return {"CPU4": (1.0 / W_SUP_MAX, 0.5), "CPU1": (3.0, 1.45), "M": (1.0, 0.5)}[population]
    return {"CPU4": (1.0, 0.0), "CPU1": (1.0, CPU1_LIF.v_l), "M": (1.0, 0.0)}[population]


@dataclass(frozen=True)
class CalibrationTable:
    """Calibrated knobs and mismatch for all 18 neurons."""

    mode: str
    neurons: tuple
    noise_cv: float = 0.0
    noise_seed: int | None = None
    threshold_scale: float = THRESHOLD_SCALE

    def __post_init__(self) -> None:
        if self.mode not in ("rate", "spiking"):
            raise CalibrationError(f"unknown calibration mode {self.mode!r}")
        if len(self.neurons) != N_NEURONS:
            raise CalibrationError(f"table needs {N_NEURONS} neurons, got {len(self.neurons)}")
        for n in self.neurons:
            if math.isnan(n.residual_max):
                raise CalibrationError(f"neuron {n.neuron_id} has no recorded residual")

    @classmethod
    def nominal(cls, mode: str) -> CalibrationTable:
        """Table of nominal knobs, assumed exact for mismatch-free neurons."""
        return cls(mode, tuple(
            NeuronCalibration(i, pop, *nominal_knobs(mode, pop), residual_max=0.0, residual_rms=0.0,
                              residual_weighted_rms=0.0, residual_mid=0.0)
            for i, pop in enumerate(POPULATIONS)
        ))

    def column(self, name: str, population: str | None = None) -> np.ndarray:
        return np.array([getattr(n, name) for n in self.neurons if population in (None, n.population)])

    def network_params(self, topology: Topology | None = None) -> NetworkParams:
        if self.mode != "rate":
            raise CalibrationError("network_params needs a rate-mode table")

        def pop(name: str, family: int) -> PopulationParams:
            return PopulationParams(self.column("a", name), self.column("b", name), self.column("gain", name),
                                    self.column("theta", name), family)

        return NetworkParams(pop("CPU4", LINEAR), pop("CPU1", LOGISTIC), pop("M", LINEAR), topology or Topology())

    def spiking_table(self) -> SpikingNeuronTable:
        if self.mode != "spiking":
            raise CalibrationError("spiking_table needs a spiking-mode table")
        lif, charge = [], []
        for n in self.neurons:
            base_lif, base_charge = _SPIKING_BASE[n.population]
            lif.append(replace(base_lif, v_l=n.b + n.theta))
            charge.append(base_charge * n.a * n.gain)
        return SpikingNeuronTable(tuple(lif), np.array(charge))

    def to_json(self) -> str:
        doc = {
            "schema": SCHEMA,
            "mode": self.mode,
            "noise_cv": self.noise_cv,
            "noise_seed": self.noise_seed,
            "threshold_scale": self.threshold_scale,
            "neurons": {str(n.neuron_id): {k: v for k, v in asdict(n).items() if k != "neuron_id"}
                        for n in self.neurons},
        }
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> CalibrationTable:
        doc = json.loads(text)
        if doc.get("schema") != SCHEMA:
            raise CalibrationError(f"unsupported calibration schema {doc.get('schema')!r}")
        neurons = tuple(NeuronCalibration(int(k), **v) for k, v in sorted(doc["neurons"].items(), key=lambda kv: int(kv[0])))
        return cls(doc["mode"], neurons, doc["noise_cv"], doc["noise_seed"], doc["threshold_scale"])


_SPIKING_BASE = {"CPU4": (CPU4_LIF, CPU4_CHARGE), "CPU1": (CPU1_LIF, CPU1_CHARGE), "M": (MOTOR_LIF, MOTOR_CHARGE)}


@dataclass(frozen=True)
class NeuronUnderTest:
    """A physical neuron: its population, simulation mode and hidden mismatch."""

    population: str
    mode: str = "rate"
    gain: float = 1.0
    theta: float = 0.0
    windows: int = 20
    settle: int = 3


@dataclass
class TransferCurve:
    inputs: np.ndarray
    rates: np.ndarray
    flagged: np.ndarray


def _rate_response(neuron: NeuronUnderTest, knobs: Sequence[float], x: np.ndarray) -> np.ndarray:
    family = LOGISTIC if neuron.population == "CPU1" else LINEAR
    pop = PopulationParams(np.full(len(x), knobs[0]), np.full(len(x), knobs[1]), np.full(len(x), neuron.gain),
                           np.full(len(x), neuron.theta), family)
    return pop.response(x)


def _simulate_independent(lif: LifParams, charge: float, exc: np.ndarray, inh: np.ndarray,
                          exc_lsb: float, inh_lsb: float, windows: int, settle: int, dt: float = 0.1,
                          slots: int = 10, exc_sources: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Rates of independent copies of one neuron, copy ``i`` driven at ``exc[i]`` and ``inh[i]``.

    Each copy receives ``exc_sources`` periodic excitatory sources and one
    inhibitory source. Returns the mean rate after ``settle`` windows and a
    flag for copies whose two measurement halves disagree by more than one
    spike per window.
    """
    p = len(exc)
    ns = (exc_sources + 1) * p
    src_e = np.zeros((ns, p))
    src_i = np.zeros((ns, p))
    jump_e = charge * exc_lsb / lif.tau_syn
    jump_i = charge * inh_lsb / lif.tau_syn
    rates = np.zeros(ns)
    for i in range(p):
        for e in range(exc_sources):
            src_e[i * (exc_sources + 1) + e, i] = jump_e
            rates[i * (exc_sources + 1) + e] = exc[i]
        src_i[i * (exc_sources + 1) + exc_sources, i] = jump_i
        rates[i * (exc_sources + 1) + exc_sources] = inh[i]
    fire = np.ascontiguousarray(periodic_fires(rates, slots))
    offset = np.zeros(fire.shape, dtype=np.int64)
    steps_per_slot = round(10.0 / dt)
    v = np.full(p, lif.v_reset)
    ie = np.zeros(p)
    ii = np.zeros(p)
    ref = np.zeros(p)
    pending = np.zeros(p, dtype=np.bool_)
    nn = np.zeros((p, p))
    counts = np.zeros(p, dtype=np.int64)
    per_window = np.zeros((windows, p))
    dummy = np.zeros(1, dtype=np.int64)
    args = (np.full(p, math.exp(-dt * lif.g_l / lif.c_m)), np.full(p, math.exp(-dt / lif.tau_syn)),
            np.full(p, 1.0 / lif.g_l), np.full(p, lif.v_l), np.full(p, lif.v_th), np.full(p, lif.v_reset),
            np.full(p, lif.t_ref))
    for w in range(settle + windows):
        counts[:] = 0
        _run_window(v, ie, ii, ref, pending, fire, offset, src_e, src_i, nn, nn, *args, dt, steps_per_slot,
                    counts, dummy, dummy, False)
        if w >= settle:
            per_window[w - settle] = counts / slots
    half = windows // 2
    flagged = np.abs(per_window[:half].mean(0) - per_window[half:].mean(0)) > 1.0 / slots if half else np.zeros(p, bool)
    return per_window.mean(0), flagged


def _spiking_response(neuron: NeuronUnderTest, knobs: Sequence[float], inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    base_lif, base_charge = _SPIKING_BASE[neuron.population]
    lif = replace(base_lif, v_l=knobs[1] + neuron.theta)
    charge = base_charge * knobs[0] * neuron.gain
    if neuron.population == "CPU4":
        # background source at full rate through a supersynapse of total w
        w = np.asarray(inputs, dtype=float)
        ones = np.ones(len(w))
        rates, flags = [], []
        for total in w:
            r, f = _simulate_independent(lif, charge, ones[:1], np.zeros(1), total, 0.0, neuron.windows, neuron.settle)
            rates.append(r[0])
            flags.append(f[0])
        return np.array(rates), np.array(flags)
    if neuron.population == "CPU1":
        e, i = inputs[:, 0], inputs[:, 1]
        return _simulate_independent(lif, charge, e, i, LSB_PER_UNIT, LSB_PER_UNIT, neuron.windows, neuron.settle)
    x = np.asarray(inputs, dtype=float)
    return _simulate_independent(lif, charge, x, np.zeros(len(x)), LSB_PER_UNIT, 0.0, neuron.windows,
                                 neuron.settle, exc_sources=4)


def neuron_response(neuron: NeuronUnderTest, knobs: Sequence[float], inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Output rates of ``neuron`` for the given knobs; second value flags unsettled samples."""
    inputs = np.asarray(inputs, dtype=float)
    if neuron.mode == "rate":
        if neuron.population == "CPU1":
            x = inputs[:, 0] - inputs[:, 1]
        else:
            x = inputs
        return _rate_response(neuron, knobs, x), np.zeros(len(inputs), dtype=bool)
    return _spiking_response(neuron, knobs, inputs)


def measure_transfer_curve(neuron: NeuronUnderTest, knobs: Sequence[float], sweep) -> TransferCurve:
    """Settled output rate of ``neuron`` at every point of a sorted input sweep."""
    sweep = np.asarray(sweep, dtype=float)
    if sweep.ndim == 1 and np.any(np.diff(sweep) < 0):
        raise CalibrationError("sweep must be sorted")
    rates, flagged = neuron_response(neuron, knobs, sweep)
    return TransferCurve(sweep, rates, flagged)


def minimax_fit(objective: Callable[[np.ndarray], float], x0, scale, tol: float = 1e-10,
                max_evals: int = 4000) -> tuple[np.ndarray, float]:
    """Minimize a nonsmooth objective over knobs normalized by ``scale``, with restarts."""
    x0 = np.asarray(x0, dtype=float)
    scale = np.asarray(scale, dtype=float)

    def scaled(z: np.ndarray) -> float:
        return objective(z * scale)

    z = x0 / scale
    best = scaled(z)
    for _ in range(4):
        res = optimize.minimize(scaled, z, method="Nelder-Mead",
                                options={"xatol": tol, "fatol": tol, "maxfev": max_evals,
                                         "initial_simplex": np.vstack([z, z + 0.05 * np.eye(len(z))])})
        if not res.fun < best:
            break
        z, best = res.x, float(res.fun)
    return z * scale, best


@dataclass
class _FitProblem:
    inputs: np.ndarray
    target: np.ndarray
    weights: np.ndarray
    mid_mask: np.ndarray


def cpu4_problem(n: int = 33) -> _FitProblem:
    w = np.linspace(0.25 * W_SUP_MAX, 0.75 * W_SUP_MAX, n)
    target = w / W_SUP_MAX
    return _FitProblem(w, target, _operating_weights(target), np.isclose(w, 0.5 * W_SUP_MAX))


def cpu1_problem(n: int = 21) -> _FitProblem:
    g = np.linspace(0.0, 1.0, n)
    e, i = np.meshgrid(g, g, indexing="ij")
    inputs = np.column_stack([e.ravel(), i.ravel()])
    target = inputs[:, 0] * (1.0 - inputs[:, 1])
    return _FitProblem(inputs, target, _operating_weights(target), np.isclose(target, 0.5))


def motor_problem(n: int = 21) -> _FitProblem:
    x = np.linspace(0.0, 1.0, n)
    return _FitProblem(x, x.copy(), _operating_weights(x), np.isclose(x, 0.5))


def _operating_weights(target: np.ndarray) -> np.ndarray:
    return np.where(np.abs(target - 0.5) <= OPERATING_BAND + 1e-12, OPERATING_WEIGHT, 1.0)


def transfer_error(neuron: NeuronUnderTest, knobs, problem: _FitProblem) -> dict:
    rates, flagged = neuron_response(neuron, knobs, problem.inputs)
    err = rates - problem.target
    w = problem.weights
    return {
        "max": float(np.abs(err).max()),
        "weighted_max": float((w * np.abs(err)).max()),
        "rms": float(np.sqrt(np.mean(err ** 2))),
        "weighted_rms": float(np.sqrt(np.sum(w * err ** 2) / np.sum(w))),
        "mid": float(np.abs(err[problem.mid_mask]).max()) if problem.mid_mask.any() else math.nan,
        "flagged": int(flagged.sum()),
    }


def _fit(neuron: NeuronUnderTest, problem: _FitProblem, knobs0, neuron_id: int) -> NeuronCalibration:
    def objective(k: np.ndarray) -> float:
        rates, _ = neuron_response(neuron, k, problem.inputs)
        return float((problem.weights * np.abs(rates - problem.target)).max())

    knobs0 = np.asarray(knobs0, dtype=float)
    scale = np.maximum(np.abs(knobs0), 0.1 * np.abs(knobs0).max())
    tol = 1e-10 if neuron.mode == "rate" else 1e-3
    knobs, _ = minimax_fit(objective, knobs0, scale, tol=tol)
    if neuron.mode == "rate" and knobs[0] <= 0:
        raise CalibrationError(f"neuron {neuron_id}: fit produced a non-positive slope")
    err = transfer_error(neuron, knobs, problem)
    return NeuronCalibration(neuron_id, neuron.population, float(knobs[0]), float(knobs[1]), neuron.gain,
                             neuron.theta, err["max"], err["rms"], err["weighted_rms"], err["mid"])


def calibrate_cpu4(neuron: NeuronUnderTest, knobs0=None, neuron_id: int = 0, problem: _FitProblem | None = None) -> NeuronCalibration:
    """Fit the knobs so the rate is proportional to the memory weight over the central half-range."""
    if neuron.population != "CPU4":
        raise CalibrationError("calibrate_cpu4 needs a CPU4 neuron")
    knobs0 = nominal_knobs(neuron.mode, "CPU4") if knobs0 is None else knobs0
    return _fit(neuron, problem or cpu4_problem(), knobs0, neuron_id)


def calibrate_cpu1_motor(neuron: NeuronUnderTest, knobs0=None, neuron_id: int = 8,
                         problem: _FitProblem | None = None) -> NeuronCalibration:
    """Fit CPU1 cells to ``r_exc * (1 - r_inh)`` and motor cells to a proportional response."""
    if neuron.population not in ("CPU1", "M"):
        raise CalibrationError("calibrate_cpu1_motor needs a CPU1 or motor neuron")
    knobs0 = nominal_knobs(neuron.mode, neuron.population) if knobs0 is None else knobs0
    if problem is None:
        problem = cpu1_problem() if neuron.population == "CPU1" else motor_problem()
    return _fit(neuron, problem, knobs0, neuron_id)


def calibrate_network(mode: str = "rate", mismatch: tuple | None = None, windows: int = 20,
                      problems: dict | None = None) -> CalibrationTable:
    """Calibrate all 18 neurons. ``mismatch`` holds per-neuron (gains, thetas)."""
    gains, thetas = mismatch if mismatch is not None else (np.ones(N_NEURONS), np.zeros(N_NEURONS))
    problems = problems or {}
    cache: dict = {}
    neurons = []
    for nid, pop in enumerate(POPULATIONS):
        nut = NeuronUnderTest(pop, mode, float(gains[nid]), float(thetas[nid]), windows=windows)
        key = (pop, nut.gain, nut.theta)
        if key not in cache:
            if pop == "CPU4":
                cache[key] = calibrate_cpu4(nut, problem=problems.get(pop))
            else:
                cache[key] = calibrate_cpu1_motor(nut, problem=problems.get(pop))
        neurons.append(replace(cache[key], neuron_id=nid))
    return CalibrationTable(mode, tuple(neurons))


def apply_fixed_pattern_noise(table: CalibrationTable, cv: float, seed: int,
                              threshold_scale: float = THRESHOLD_SCALE) -> CalibrationTable:
    """Perturb every neuron: gain times N(1, cv), threshold plus N(0, cv * threshold_scale)."""
    if cv < 0:
        raise ValueError("cv must be non-negative")
    if cv == 0:
        return table
    rng = np.random.default_rng(seed)
    gains = np.empty(N_NEURONS)
    thetas = np.empty(N_NEURONS)
    for pop in ("CPU4", "CPU1", "M"):
        idx = [i for i, name in enumerate(POPULATIONS) if name == pop]
        gains[idx] = rng.normal(1.0, cv, len(idx))
        thetas[idx] = rng.normal(0.0, cv * threshold_scale, len(idx))
    neurons = tuple(replace(n, gain=n.gain * g, theta=n.theta + t) for n, g, t in zip(table.neurons, gains, thetas))
    return replace(table, neurons=neurons, noise_cv=cv, noise_seed=seed, threshold_scale=threshold_scale)
