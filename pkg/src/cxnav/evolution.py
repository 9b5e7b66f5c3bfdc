"""Evolution strategy over the CPU1 synaptic weights.

Soft selection with weights proportional to ``|f|**-8``, weighted
recombination of the mean and a covariance built from weighted outer
products of the population around the new mean.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .genome import Genome
from .trajectory import LOOPING, Trajectory

FITNESS_EPS = 1e-6
JITTER = 1e-8
SELECTION_POWER = 8


class EvolutionError(RuntimeError):
    pass


def _centroid_and_spread(xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = xy.mean(axis=0)
    spread = np.sqrt(((xy - mean) ** 2).mean(axis=0))
    return mean, spread


def fitness(trajectories: Sequence[Trajectory]) -> float:
    """Negative time-averaged distance of the looping phase from home, averaged over runs.

    Each run contributes ``|<x>| + |sqrt(<(x - <x>)^2>)|`` where the square
    root is taken per component and ``|.|`` is the Euclidean norm.
    """
    if len(trajectories) == 0:
        raise EvolutionError("no trajectories to score")
    terms = []
    for traj in trajectories:
        xy = traj.xy[traj.phase == LOOPING]
        if len(xy) == 0:
            raise EvolutionError("trajectory has an empty looping phase")
        mean, spread = _centroid_and_spread(xy)
        terms.append(np.linalg.norm(mean) + np.linalg.norm(spread))
    return -float(np.mean(terms))


def selection_weights(fitnesses) -> np.ndarray:
    """Normalized soft-selection probabilities ``|f|**-8 / sum |f|**-8``."""
    f = np.maximum(np.abs(np.asarray(fitnesses, dtype=float)), FITNESS_EPS)
    # rescale before the power so large fitness magnitudes cannot underflow
    logp = -SELECTION_POWER * np.log(f / f.min())
    p = np.exp(logp)
    return p / p.sum()


def recombine_mean(p, genomes) -> np.ndarray:
    return np.asarray(p, dtype=float) @ np.asarray(genomes, dtype=float)


def update_covariance(p, genomes, mean, jitter: float = JITTER) -> np.ndarray:
    """``sum_i p_i d_i d_i^T + jitter * I`` with ``d_i = w_i - mean``."""
    d = np.asarray(genomes, dtype=float) - np.asarray(mean, dtype=float)
    p = np.asarray(p, dtype=float)
    cov = (d.T * p) @ d
    cov = 0.5 * (cov + cov.T)
    return cov + jitter * np.eye(d.shape[1])


def sample_population(mean, cov, sigma: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` genomes from ``N(mean, sigma * cov)``."""
    mean = np.asarray(mean, dtype=float)
    scaled = sigma * np.asarray(cov, dtype=float)
    try:
        chol = np.linalg.cholesky(scaled)
    except np.linalg.LinAlgError:
        scale = max(np.abs(np.diag(scaled)).max(), 1.0)
        try:
            chol = np.linalg.cholesky(scaled + 1e-10 * scale * np.eye(len(mean)))
        except np.linalg.LinAlgError as err:
            raise EvolutionError("covariance is not positive definite") from err
    z = rng.standard_normal((n, len(mean)))
    return mean + z @ chol.T


@dataclass(frozen=True)
class EsConfig:
    """Settings of the evolution strategy.

    ``cov_rate`` blends the new outer-product covariance into the previous
    one; 1.0 discards all history.
    """

    population: int = 15
    sigma: float = 0.3
    generations: int = 320
    cov_rate: float = 0.15
    runs_per_eval: int = 3
    snapshot_every: int = 10

    def __post_init__(self) -> None:
        if self.population < 2:
            raise ValueError("population must hold at least two individuals")
        if self.sigma <= 0 or not 0 < self.cov_rate <= 1:
            raise ValueError("need sigma > 0 and 0 < cov_rate <= 1")
        if self.generations < 0:
            raise ValueError("generations must be non-negative")


@dataclass
class EsState:
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    generation: int = 0
    population: np.ndarray | None = None
    fitnesses: np.ndarray | None = None


@dataclass
class GenerationRecord:
    generation: int
    best_fitness: float
    mean_fitness: float
    mean_genome: np.ndarray
    best_genome: np.ndarray


@dataclass
class EsHistory:
    records: list[GenerationRecord] = field(default_factory=list)
    best_fitness: float = -np.inf
    best_genome: np.ndarray | None = None
    final_state: EsState | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def best_overall(self) -> Genome:
        return Genome.from_vector(self.best_genome)


# (population vectors, per-generation evaluation seeds) -> fitness per individual
Evaluator = Callable[[np.ndarray, tuple], np.ndarray]


def elementwise(fn: Callable[[np.ndarray], float]) -> Evaluator:
    """Wrap a per-genome objective that ignores the evaluation seeds."""
    def evaluate(population: np.ndarray, seeds: tuple) -> np.ndarray:
        return np.array([fn(w) for w in population])
    return evaluate


def generation_seeds(master_seed: int, generation: int, runs: int) -> tuple:
    """Outbound seeds shared by every individual of one generation."""
    ss = np.random.SeedSequence([master_seed, 1, generation])
    return tuple(int(s) for s in ss.generate_state(runs, dtype=np.uint64))


def evolve(config: EsConfig, evaluator: Evaluator, master_seed: int, mean0=None,
           on_generation: Callable[[GenerationRecord], None] | None = None) -> EsHistory:
    """Run the strategy for ``config.generations`` generations."""
    mean = np.array(Genome.primitive().to_vector() if mean0 is None else mean0, dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, 0]))
    state = EsState(mean=mean, sigma=config.sigma, cov=np.eye(len(mean)))
    history = EsHistory()
    for gen in range(config.generations):
        population = sample_population(state.mean, state.cov, state.sigma, config.population, rng)
        seeds = generation_seeds(master_seed, gen, config.runs_per_eval)
        try:
            fits = np.asarray(evaluator(population, seeds), dtype=float)
        except Exception as err:
            raise EvolutionError(f"evaluation failed in generation {gen}: {err}") from err
        if fits.shape != (config.population,) or not np.all(np.isfinite(fits)):
            raise EvolutionError(f"generation {gen}: evaluator returned invalid fitnesses {fits}")
        p = selection_weights(fits)
        new_mean = recombine_mean(p, population)
        sample_cov = update_covariance(p, population, new_mean, jitter=0.0)
        cov = (1.0 - config.cov_rate) * state.cov + config.cov_rate * sample_cov
        cov = 0.5 * (cov + cov.T) + JITTER * np.eye(len(mean))
        best = int(np.argmax(fits))
        record = GenerationRecord(gen, float(fits[best]), float(fits.mean()), new_mean.copy(), population[best].copy())
        history.records.append(record)
        if fits[best] > history.best_fitness:
            history.best_fitness = float(fits[best])
            history.best_genome = population[best].copy()
        state = EsState(new_mean, state.sigma, cov, gen + 1, population, fits)
        if on_generation is not None:
            on_generation(record)
    history.final_state = state
    return history
