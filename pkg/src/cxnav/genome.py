"""The 26 evolvable weights around the CPU1 steering population."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

N_GENES = 26
# one unit of genome weight is four LSBs of a 6-bit synapse
LSB_PER_UNIT = 4
WEIGHT_MAX = 63 / LSB_PER_UNIT


class GenomeError(ValueError):
    pass


def _as_block(values, n: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if arr.shape != (n,):
        raise GenomeError(f"{name} needs {n} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise GenomeError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Genome:
    """Weights feeding and leaving CPU1, in synapse-weight units.

    Cells are ordered left hemisphere first (indices 0-3), then right
    (4-7). ``cpu1_to_m`` holds the left and right motor synapses.
    """

    tb1_to_cpu1: np.ndarray
    cpu4_to_cpu1_exc: np.ndarray
    cpu4_to_cpu1_inh: np.ndarray
    cpu1_to_m: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "tb1_to_cpu1", _as_block(self.tb1_to_cpu1, 8, "tb1_to_cpu1"))
        object.__setattr__(self, "cpu4_to_cpu1_exc", _as_block(self.cpu4_to_cpu1_exc, 8, "cpu4_to_cpu1_exc"))
        object.__setattr__(self, "cpu4_to_cpu1_inh", _as_block(self.cpu4_to_cpu1_inh, 8, "cpu4_to_cpu1_inh"))
        object.__setattr__(self, "cpu1_to_m", _as_block(self.cpu1_to_m, 2, "cpu1_to_m"))

    @classmethod
    def from_vector(cls, vec) -> Genome:
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.shape != (N_GENES,):
            raise GenomeError(f"genome vector needs {N_GENES} entries, got {vec.size}")
        return cls(vec[0:8], vec[8:16], vec[16:24], vec[24:26])

    @classmethod
    def uniform(cls, tb1: float, exc: float, inh: float, motor: float) -> Genome:
        return cls(np.full(8, tb1), np.full(8, exc), np.full(8, inh), np.full(2, motor))

    @classmethod
    def primitive(cls) -> Genome:
        """Hand-set starting genome with identical weights per synapse type."""
        return cls.uniform(tb1=1.5, exc=10.0, inh=10.0, motor=4.0)

    @classmethod
    def zeros(cls) -> Genome:
        return cls.uniform(0.0, 0.0, 0.0, 0.0)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.tb1_to_cpu1, self.cpu4_to_cpu1_exc, self.cpu4_to_cpu1_inh, self.cpu1_to_m])

    def clamped(self) -> Genome:
        """Weights clipped to the representable synapse range."""
        return Genome.from_vector(np.clip(self.to_vector(), 0.0, WEIGHT_MAX))

    def quantized(self) -> np.ndarray:
        """Integer 6-bit synapse codes after clamping."""
        codes = np.rint(self.clamped().to_vector() * LSB_PER_UNIT)
        return np.clip(codes, 0, 63).astype(np.int64)

    def digest(self) -> str:
        return hashlib.sha256(self.to_vector().tobytes()).hexdigest()[:16]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Genome):
            return NotImplemented
        return bool(np.array_equal(self.to_vector(), other.to_vector()))

    def __hash__(self) -> int:
        return hash(self.to_vector().tobytes())
