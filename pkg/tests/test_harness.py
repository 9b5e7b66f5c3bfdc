from __future__ import annotations

import csv
import json
from dataclasses import fields, replace

import numpy as np
import pytest

from cxnav.calibration import CalibrationTable
from cxnav.config import ConfigError, JourneyConfig
from cxnav.genome import Genome
from cxnav.harness import (
    SummaryStats, UsageError, chip_table, compare_integrators, journey_seed, load_settings, main,
    read_genome_json, read_trajectory_csv, run_batch, run_journey, summary_stats, write_spikes_csv,
    write_trajectory_csv,
)
from cxnav.spiking_core import run_spiking_journey
from cxnav.trajectory import from_arrays

CFG = JourneyConfig()


def _parked(x: float, y: float, n: int = 30) -> "Trajectory":
    data = np.zeros((n, 3))
    data[:, 0], data[:, 1] = x, y
    return from_arrays(data, n // 3, 100.0)


class TestSummaryStats:
    def test_parked_at_origin(self):
        s = summary_stats([_parked(0.0, 0.0)])
        assert s.mean_return_deviation == 0.0 and s.mean_looping_radius == 0.0
        assert s.within_1000_fraction == 1.0 and s.overlap_fraction == 1.0

    def test_parked_at_boundary(self):
        s = summary_stats([_parked(600.0, 800.0)], d_overlap=35.0)
        assert s.mean_return_deviation == pytest.approx(1000.0)
        assert s.within_1000_fraction == 1.0 and s.overlap_fraction == 0.0

    def test_mirrored_batch(self):
        a, b = _parked(300.0, 50.0), _parked(-300.0, 50.0)
        s = summary_stats([a, b])
        assert s.mean_dx == 0.0 and s.std_dx == 300.0 and s.mean_dy == 50.0

    def test_permutation_invariant(self):
        batch = [run_journey(CFG, Genome.primitive(), chip_table(CFG), s)[0] for s in range(6)]
        a = summary_stats(batch)
        b = summary_stats(batch[::-1])
        for f in fields(SummaryStats):
            assert getattr(a, f.name) == pytest.approx(getattr(b, f.name), rel=1e-12)

    def test_invariants(self):
        stats, _ = run_batch(CFG, Genome.primitive(), 20, 1)
        assert 0 <= stats.overlap_fraction <= stats.within_1000_fraction <= 1

    def test_empty_batch(self):
        with pytest.raises(UsageError):
            summary_stats([])


class TestBatch:
    def test_single_journey_matches_direct_run(self):
        _, records = run_batch(CFG, Genome.primitive(), 1, 42)
        direct, _ = run_journey(CFG, Genome.primitive(), chip_table(CFG), journey_seed(42, 0))
        assert records[0].trajectory == direct

    def test_same_seed_same_stats(self):
        a, _ = run_batch(CFG, Genome.primitive(), 10, 3)
        b, _ = run_batch(CFG, Genome.primitive(), 10, 3)
        assert a == b

    def test_worker_count_independent(self):
        a, ra = run_batch(CFG, Genome.primitive(), 8, 5, workers=1)
        b, rb = run_batch(CFG, Genome.primitive(), 8, 5, workers=3)
        assert a == b and all(x.trajectory == y.trajectory for x, y in zip(ra, rb))

    def test_rate_homing(self):
        stats, _ = run_batch(CFG, Genome.primitive(), 100, 0)
        assert stats.mean_return_deviation_pct <= 10.0

    def test_failures_recorded(self, monkeypatch):
        import cxnav.harness as h
        real = h.run_journey

        def flaky(config, genome, table, seed, record_spikes=False):
            if seed == journey_seed(9, 1):
                raise RuntimeError("chip fault")
            return real(config, genome, table, seed, record_spikes)

        monkeypatch.setattr(h, "run_journey", flaky)
        stats, records = run_batch(CFG, Genome.primitive(), 3, 9)
        assert stats.n_failed == 1 and stats.n_journeys == 2
        assert records[1].error.startswith("RuntimeError") and records[1].trajectory is None

    def test_empty(self):
        with pytest.raises(UsageError):
            run_batch(CFG, Genome.primitive(), 0, 0)

    def test_mode_mismatch(self):
        with pytest.raises(UsageError):
            chip_table(CFG, CalibrationTable.nominal("spiking"))


class TestFiles:
    def test_trajectory_round_trip(self, tmp_path):
        traj, _ = run_journey(CFG, Genome.primitive(), chip_table(CFG), 7)
        write_trajectory_csv(tmp_path / "t.csv", traj)
        assert read_trajectory_csv(tmp_path / "t.csv") == traj
        with open(tmp_path / "t.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "t_bio_ms", "x", "y", "phi", "phase"]
        phases = [r[5] for r in rows[1:]]
        assert phases.index("return") == CFG.n_return and phases.index("looping") == 2 * CFG.n_return

    def test_spike_csv(self, tmp_path):
        cfg = JourneyConfig(t_stop=2_000, t_return=1_000, mode="spiking")
        _, spikes = run_spiking_journey(cfg, Genome.primitive(), rng=np.random.default_rng(0))
        write_spikes_csv(tmp_path / "s.csv", spikes)
        with open(tmp_path / "s.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["t_ms_bio", "neuron_id", "population"] and len(rows) == len(spikes) + 1

    def test_bad_header(self, tmp_path):
        (tmp_path / "t.csv").write_text("a,b\n")
        with pytest.raises(UsageError):
            read_trajectory_csv(tmp_path / "t.csv")


class TestConfig:
    def test_defaults_match_shipped_file(self, shipped_config):
        s = load_settings(shipped_config)
        d = load_settings(None)
        assert s == d

    def test_overrides(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[journey]\nmode = spiking\nnoise_cv = 0.1\n[world]\nv_max = 50\n[evolution]\ngenerations = 7\n")
        s = load_settings(p)
        assert s.journey.mode == "spiking" and s.journey.noise_cv == 0.1
        assert s.journey.world.v_max == 50.0 and s.evolution.generations == 7

    @pytest.mark.parametrize("text", [
        "[journey]\nbogus = 1\n", "[nope]\na = 1\n", "[journey]\nh = abc\n", "[journey]\nt_return = 300000\n",
        "[journey]\nmode = quantum\n", "not an ini",
    ])
    def test_bad_config(self, tmp_path, text):
        p = tmp_path / "c.ini"
        p.write_text(text)
        with pytest.raises(ConfigError):
            load_settings(p)


class TestCli:
    def test_run(self, tmp_path):
        assert main(["run", "--seed", "1", "--mode", "rate", "--out", str(tmp_path)]) == 0
        traj = read_trajectory_csv(tmp_path / "trajectory.csv")
        assert len(traj) == 2000 and (tmp_path / "spikes.csv").exists()

    def test_run_hardware_fidelity(self, tmp_path):
        assert main(["run", "--fidelity", "hardware16", "--out", str(tmp_path)]) == 0
        assert len(read_trajectory_csv(tmp_path / "trajectory.csv")) == 2000

    def test_batch(self, tmp_path):
        assert main(["batch", "--journeys", "100", "--out", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "stats.json").read_text())
        assert doc["schema"] == "cxnav.stats/1"
        assert {f.name for f in fields(SummaryStats)} <= set(doc)
        assert len(list((tmp_path / "trajectories").glob("*.csv"))) == 100

    def test_evolve(self, tmp_path):
        assert main(["evolve", "--generations", "50", "--journeys", "0", "--out", str(tmp_path)]) == 0
        hist = np.loadtxt(tmp_path / "es_history.csv", delimiter=",", skiprows=1)
        assert hist.shape == (50, 3)
        blocks = (-hist[:, 1]).reshape(5, 10).mean(axis=1)
        assert np.all(np.diff(blocks) <= 0)
        genome = read_genome_json(tmp_path / "genome.json")
        assert isinstance(genome, Genome)
        assert len(list((tmp_path / "genomes").glob("*.json"))) == 5

    def test_calibrate(self, tmp_path):
        assert main(["calibrate", "--mode", "rate", "--out", str(tmp_path)]) == 0
        table = CalibrationTable.from_json((tmp_path / "calibration.json").read_text())
        assert table.mode == "rate" and len(table.neurons) == 18

    def test_run_with_calibration_file(self, tmp_path):
        (tmp_path / "cal.json").write_text(CalibrationTable.nominal("rate").to_json())
        assert main(["run", "--calibration", str(tmp_path / "cal.json"), "--out", str(tmp_path)]) == 0
        assert main(["run", "--mode", "spiking", "--calibration", str(tmp_path / "cal.json"),
                     "--out", str(tmp_path)]) == 1

    def test_compare(self, tmp_path):
        (tmp_path / "cal.json").write_text(CalibrationTable.nominal("spiking").to_json())
        assert main(["compare", "--journeys", "2", "--calibration", str(tmp_path / "cal.json"),
                     "--out", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "compare.json").read_text())
        assert doc["n_stimuli"] == 2 and doc["max_fraction_of_full_scale"] < 0.05

    @pytest.mark.parametrize("argv", [["run", "--bogus"], ["fly"], [], ["run", "--mode", "quantum"],
                                      ["run", "--seed", "-4"], ["run", "--config", "/nonexistent.ini"]])
    def test_usage_errors(self, argv, tmp_path, capsys):
        assert main(argv + ["--out", str(tmp_path)] if argv else argv) == 1
        assert "error" in capsys.readouterr().err

    def test_runtime_failure(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text("{not json")
        assert main(["run", "--calibration", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2
        assert "failed" in capsys.readouterr().err

    def test_evolve_requires_rate_mode(self, tmp_path):
        assert main(["evolve", "--mode", "spiking", "--generations", "1", "--out", str(tmp_path)]) == 1

    def test_byte_identical_outputs(self, tmp_path):
        for name, workers in (("a", "1"), ("b", "2")):
            assert main(["batch", "--journeys", "6", "--seed", "11", "--workers", workers,
                         "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "stats.json").read_bytes() == (tmp_path / "b" / "stats.json").read_bytes()


def test_compare_integrators_tolerance():
    report = compare_integrators(replace(CFG, mode="spiking"), n_stimuli=3, n_updates=200, seed=0,
                                 table=CalibrationTable.nominal("spiking"))
    assert report["max_fraction_of_full_scale"] < 0.05
