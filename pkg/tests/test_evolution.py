from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxnav.evolution import (
    EsConfig, EvolutionError, elementwise, evolve, fitness, generation_seeds, recombine_mean, sample_population,
    selection_weights, update_covariance,
)
from cxnav.genome import N_GENES, WEIGHT_MAX, Genome, GenomeError
from cxnav.trajectory import Trajectory, from_arrays


def _looping(xy: np.ndarray) -> Trajectory:
    """Trajectory whose looping phase is exactly ``xy``."""
    n = len(xy)
    full = np.zeros((3 * n, 3))
    full[2 * n:, :2] = xy
    return from_arrays(full, n, 100.0)


class TestFitness:
    def test_parked_at_origin(self):
        assert fitness([_looping(np.zeros((10, 2)))] * 3) == 0.0

    def test_parked_off_origin(self):
        assert fitness([_looping(np.tile([3.0, 4.0], (10, 1)))]) == pytest.approx(-5.0)

    def test_circle(self):
        t = np.linspace(0, 2 * math.pi, 4000, endpoint=False)
        xy = 7.0 * np.column_stack([np.cos(t), np.sin(t)])
        assert fitness([_looping(xy)]) == pytest.approx(-7.0, rel=1e-9)

    def test_averages_runs(self):
        a = _looping(np.tile([3.0, 4.0], (10, 1)))
        b = _looping(np.zeros((10, 2)))
        assert fitness([a, b]) == pytest.approx(-2.5)

    def test_errors(self):
        with pytest.raises(EvolutionError):
            fitness([])
        with pytest.raises(EvolutionError):
            fitness([from_arrays(np.zeros((5, 3)), 5, 100.0)])


class TestSelection:
    def test_uniform(self):
        assert np.allclose(selection_weights(np.full(15, -3.0)), 1 / 15)

    def test_two(self):
        assert selection_weights([-1.0, -2.0]) == pytest.approx([0.996109, 0.003891], abs=1e-6)

    @given(st.lists(st.floats(-1e4, -1e-3), min_size=2, max_size=15), st.floats(1e-3, 1e3))
    def test_normalized_and_scale_invariant(self, f, c):
        p = selection_weights(f)
        assert abs(p.sum() - 1.0) < 1e-12 and (p > 0).all()
        assert np.allclose(selection_weights(np.array(f) * c), p, rtol=1e-9, atol=1e-15)

    def test_clamps_zero(self):
        p = selection_weights([0.0, -1.0])
        assert np.isfinite(p).all() and p[0] > p[1]


class TestRecombination:
    def test_identical(self):
        g = np.random.default_rng(0).random((4, N_GENES))
        same = np.tile(g[0], (4, 1))
        assert np.allclose(recombine_mean(np.full(4, 0.25), same), g[0])

    def test_one_hot(self):
        g = np.random.default_rng(0).random((4, N_GENES))
        assert np.array_equal(recombine_mean([0, 0, 1, 0], g), g[2])

    def test_weighted(self):
        g = np.array([[0.0, 4.0], [8.0, 0.0]])
        assert np.allclose(recombine_mean([0.25, 0.75], g), [6.0, 1.0])


class TestCovariance:
    def test_equal_genomes(self):
        g = np.ones((5, 3))
        assert np.allclose(update_covariance(np.full(5, 0.2), g, g[0]), 1e-8 * np.eye(3), atol=1e-20)

    def test_axis_aligned(self):
        g = np.zeros((4, 3))
        g[:, 0] = [-1, 1, -2, 2]
        c = update_covariance(np.full(4, 0.25), g, np.zeros(3))
        assert c[0, 0] > 1 and np.allclose(c[1:, 1:], 1e-8 * np.eye(2))

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        g = rng.normal(size=(15, N_GENES))
        p = selection_weights(-rng.uniform(1, 5, 15))
        mu = recombine_mean(p, g)
        brute = sum(pi * np.outer(gi - mu, gi - mu) for pi, gi in zip(p, g)) + 1e-8 * np.eye(N_GENES)
        c = update_covariance(p, g, mu)
        assert np.abs(c - brute).max() < 1e-12
        assert np.array_equal(c, c.T) and np.linalg.eigvalsh(c).min() >= 1e-8 * (1 - 1e-6)


class TestSampling:
    def test_zero_sigma_limit(self):
        s = sample_population(np.arange(3.0), np.eye(3), 1e-30, 5, np.random.default_rng(0))
        assert np.allclose(s, np.arange(3.0))

    def test_variance(self):
        s = sample_population(np.zeros(N_GENES), np.eye(N_GENES), 0.3, 10_000, np.random.default_rng(0))
        assert np.allclose(s.var(axis=0), 0.3, rtol=0.05)

    def test_reproducible(self):
        a = sample_population(np.zeros(4), np.eye(4), 0.3, 15, np.random.default_rng(7))
        b = sample_population(np.zeros(4), np.eye(4), 0.3, 15, np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_rank_deficient_repaired(self):
        v = np.ones((4, 1))
        s = sample_population(np.zeros(4), v @ v.T, 0.3, 3, np.random.default_rng(0))
        assert np.isfinite(s).all()

    def test_indefinite_rejected(self):
        with pytest.raises(EvolutionError):
            sample_population(np.zeros(2), -np.eye(2), 0.3, 3, np.random.default_rng(0))


class TestEvolve:
    # optimum at unit distance per coordinate from the start, the scale of the initial covariance
    TARGET = np.random.default_rng(100).normal(0.0, 1.0, N_GENES)

    def quadratic(self, w):
        return -float(np.sum((w - self.TARGET) ** 2))

    def test_quadratic_converges(self):
        cfg = EsConfig(generations=100)
        hist = evolve(cfg, elementwise(self.quadratic), master_seed=0, mean0=np.zeros(N_GENES))
        assert abs(hist.records[-1].best_fitness) < 1e-2
        assert abs(hist.best_fitness) < 1e-2

    def test_reproducible(self):
        cfg = EsConfig(generations=10)
        a = evolve(cfg, elementwise(self.quadratic), 3)
        b = evolve(cfg, elementwise(self.quadratic), 3)
        assert np.array_equal(a.column("best_fitness"), b.column("best_fitness"))
        assert np.array_equal(a.records[-1].mean_genome, b.records[-1].mean_genome)

    def test_constant_objective_only_drifts(self):
        cfg = EsConfig(generations=20, sigma=0.01)
        hist = evolve(cfg, elementwise(lambda w: -1.0), 0)
        drift = hist.records[-1].mean_genome - Genome.primitive().to_vector()
        assert np.abs(drift).max() < 0.5

    def test_evaluator_receives_shared_seeds(self):
        seen = []

        def evaluator(pop, seeds):
            seen.append(seeds)
            return -np.ones(len(pop))

        evolve(EsConfig(generations=3), evaluator, 5)
        assert seen == [generation_seeds(5, g, 3) for g in range(3)]
        assert len(set(seen)) == 3

    def test_evaluator_failure_is_reported(self):
        def broken(pop, seeds):
            raise RuntimeError("boom")
        with pytest.raises(EvolutionError, match="generation 0"):
            evolve(EsConfig(generations=2), broken, 0)

    def test_invalid_fitness_rejected(self):
        with pytest.raises(EvolutionError):
            evolve(EsConfig(generations=1), lambda pop, seeds: np.full(len(pop), np.nan), 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EsConfig(population=1)
        with pytest.raises(ValueError):
            EsConfig(cov_rate=0.0)


class TestGenome:
    def test_vector_round_trip(self):
        v = np.arange(N_GENES, dtype=float)
        g = Genome.from_vector(v)
        assert np.array_equal(g.to_vector(), v) and g == Genome.from_vector(v)
        assert hash(g) == hash(Genome.from_vector(v))

    def test_layout(self):
        g = Genome.uniform(1, 2, 3, 4)
        assert g.to_vector()[[0, 8, 16, 24]].tolist() == [1, 2, 3, 4]

    def test_clamping_and_codes(self):
        g = Genome.from_vector(np.r_[np.full(13, -1.0), np.full(13, 100.0)])
        assert g.clamped().to_vector().min() == 0 and g.clamped().to_vector().max() == WEIGHT_MAX
        assert g.quantized().min() == 0 and g.quantized().max() == 63

    def test_immutable(self):
        g = Genome.primitive()
        with pytest.raises(ValueError):
            g.tb1_to_cpu1[0] = 3.0

    def test_validation(self):
        with pytest.raises(GenomeError):
            Genome.from_vector(np.zeros(25))
        with pytest.raises(GenomeError):
            Genome.from_vector(np.r_[np.zeros(25), np.nan])

    def test_digest_stable(self):
        assert Genome.primitive().digest() == Genome.primitive().digest()
        assert Genome.primitive().digest() != Genome.zeros().digest()
