"""Phase-labelled trajectory records."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PHASES = ("outbound", "return", "looping")
OUTBOUND, RETURN, LOOPING = range(3)


def phase_labels(n_updates: int, n_return: int) -> np.ndarray:
    """Phase code for every update index: outbound, return, then looping from ``2*n_return``."""
    steps = np.arange(n_updates)
    return np.where(steps < n_return, OUTBOUND, np.where(steps < 2 * n_return, RETURN, LOOPING)).astype(np.int8)


@dataclass(eq=False)
class Trajectory:
    """Per-update agent record.

    ``step`` and ``t_bio_ms`` give the update index and its start time; the
    position and heading are those reached at the end of that update.
    """

    step: np.ndarray
    t_bio_ms: np.ndarray
    x: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    phase: np.ndarray
    meta: dict = field(default_factory=dict)
    overflow: bool = False
    capacity_exceeded: bool = False

    def __len__(self) -> int:
        return len(self.step)

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def select(self, phase: int) -> Trajectory:
        mask = self.phase == phase
        return Trajectory(self.step[mask], self.t_bio_ms[mask], self.x[mask], self.y[mask],
                          self.phi[mask], self.phase[mask], dict(self.meta))

    def looping_xy(self) -> np.ndarray:
        return self.xy[self.phase == LOOPING]

    def position_at(self, step: int) -> np.ndarray:
        idx = np.searchsorted(self.step, step)
        if idx >= len(self.step) or self.step[idx] != step:
            raise KeyError(f"step {step} not recorded")
        return np.array([self.x[idx], self.y[idx]])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("step", "t_bio_ms", "x", "y", "phi", "phase")
        )


def from_arrays(xy_phi: np.ndarray, n_return: int, dt_update: float, meta: dict | None = None) -> Trajectory:
    """Build a full-precision trajectory from an ``(n, 3)`` array of x, y, phi."""
    n = len(xy_phi)
    step = np.arange(n, dtype=np.int64)
    return Trajectory(
        step=step,
        t_bio_ms=step * dt_update,
        x=np.array(xy_phi[:, 0], dtype=float),
        y=np.array(xy_phi[:, 1], dtype=float),
        phi=np.array(xy_phi[:, 2], dtype=float),
        phase=phase_labels(n, n_return),
        meta=dict(meta or {}),
    )


INT16_MIN, INT16_MAX = -32768, 32767


def round_half_away(value: float) -> int:
    return int(np.sign(value) * np.floor(abs(value) + 0.5))


@dataclass
class FidelityRecorder:
    """Position store emulating the 16-bit, fixed-capacity trajectory memory."""

    capacity: int = 1000
    steps: list = field(default_factory=list)
    xs: list = field(default_factory=list)
    ys: list = field(default_factory=list)
    phis: list = field(default_factory=list)
    overflow: bool = False
    capacity_exceeded: bool = False

    def record(self, step: int, x: float, y: float, phi: float) -> bool:
        """Store a rounded, clamped position; returns False once the memory is full."""
        if len(self.steps) >= self.capacity:
            self.capacity_exceeded = True
            return False
        qx, qy = round_half_away(x), round_half_away(y)
        cx = min(max(qx, INT16_MIN), INT16_MAX)
        cy = min(max(qy, INT16_MIN), INT16_MAX)
        if (cx, cy) != (qx, qy):
            self.overflow = True
        self.steps.append(step)
        self.xs.append(cx)
        self.ys.append(cy)
        self.phis.append(phi)
        return True

    def __len__(self) -> int:
        return len(self.steps)

    def to_trajectory(self, n_return: int, dt_update: float, meta: dict | None = None) -> Trajectory:
        step = np.array(self.steps, dtype=np.int64)
        n_total = int(step.max()) + 1 if len(step) else 0
        phases = phase_labels(n_total, n_return)[step] if len(step) else np.zeros(0, np.int8)
        return Trajectory(
            step=step,
            t_bio_ms=step * dt_update,
            x=np.array(self.xs, dtype=float),
            y=np.array(self.ys, dtype=float),
            phi=np.array(self.phis, dtype=float),
            phase=phases,
            meta=dict(meta or {}),
            overflow=self.overflow,
            capacity_exceeded=self.capacity_exceeded,
        )
