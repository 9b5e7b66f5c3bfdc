"""Journey and schedule configuration shared by the simulation modes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .agent_world import WorldParams


class ConfigError(ValueError):
    """Raised for inconsistent or malformed configuration."""


def _divides(small: float, big: float) -> bool:
    ratio = big / small
    return math.isclose(ratio, round(ratio), rel_tol=0.0, abs_tol=1e-9)


@dataclass(frozen=True)
class ScheduleConfig:
    """Timing of the update cycle, all in biological milliseconds."""

    dt_update: float = 100.0
    dt_spike_slot: float = 10.0
    dt_neuron: float = 0.1
    record_stride: int = 2
    max_records: int = 1000

    def __post_init__(self) -> None:
        if min(self.dt_update, self.dt_spike_slot, self.dt_neuron) <= 0:
            raise ConfigError("schedule time steps must be positive")
        if not _divides(self.dt_spike_slot, self.dt_update):
            raise ConfigError("dt_spike_slot must divide dt_update")
        if not _divides(self.dt_neuron, self.dt_spike_slot):
            raise ConfigError("dt_neuron must divide dt_spike_slot")
        if self.record_stride < 1 or self.max_records < 1:
            raise ConfigError("record_stride and max_records must be positive")

    @property
    def slots_per_update(self) -> int:
        return round(self.dt_update / self.dt_spike_slot)

    @property
    def steps_per_slot(self) -> int:
        return round(self.dt_spike_slot / self.dt_neuron)


MODES = ("rate", "spiking")
FIDELITIES = ("full", "hardware16")


@dataclass(frozen=True)
class JourneyConfig:
    """Everything needed to run one journey.

    Times are biological milliseconds. ``h`` and ``k`` are the integrator
    gain and decay of the CPU4 memory. ``noise_cv`` is the coefficient of
    variation of the fixed-pattern noise; ``noise_seed`` selects the
    mismatch pattern (the simulated chip).
    """

    t_stop: float = 200_000.0
    t_return: float = 50_000.0
    h: float = 0.0336
    k: float = 2.0
    mode: str = "rate"
    fidelity: str = "full"
    seed: int = 0
    noise_cv: float = 0.0
    noise_seed: int = 0
    world: WorldParams = field(default_factory=WorldParams)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self) -> None:
        if not 0 < self.t_return < self.t_stop:
            raise ConfigError("need 0 < t_return < t_stop")
        for name in ("t_stop", "t_return"):
            if not _divides(self.schedule.dt_update, getattr(self, name)):
                raise ConfigError(f"{name} must be a multiple of dt_update")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fidelity not in FIDELITIES:
            raise ConfigError(f"fidelity must be one of {FIDELITIES}, got {self.fidelity!r}")
        if self.noise_cv < 0:
            raise ConfigError("noise_cv must be non-negative")
        if self.h <= 0 or self.k < 0:
            raise ConfigError("need h > 0 and k >= 0")

    @property
    def dt_update(self) -> float:
        return self.schedule.dt_update

    @property
    def n_updates(self) -> int:
        return round(self.t_stop / self.dt_update)

    @property
    def n_return(self) -> int:
        """Index of the first update of the return phase."""
        return round(self.t_return / self.dt_update)
