"""Batch statistics, file export, configuration files and the command-line interface."""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache, partial
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent_world import WorldParams, sense, step_outbound, AgentState
from .calibration import CalibrationTable, apply_fixed_pattern_noise, calibrate_network
from .config import ConfigError, JourneyConfig, ScheduleConfig
from .evolution import EsConfig, EsHistory, GenerationRecord, evolve, fitness
from .genome import Genome
from .rate_oracle import BASELINE, COUNTS_PER_WINDOW, cpu4_state_update, run_rate_journey
from .spiking_core import TB1_SRC, TN_SRC, N_SOURCES, SpikeRecord, SpikingSimulation, run_spiking_journey
from .trajectory import OUTBOUND, LOOPING, PHASES, Trajectory

STATS_SCHEMA = "cxnav.stats/1"
GENOME_SCHEMA = "cxnav.genome/1"
COMPARE_SCHEMA = "cxnav.compare/1"
TRAJECTORY_COLUMNS = ("step", "t_bio_ms", "x", "y", "phi", "phase")
SPIKE_COLUMNS = ("t_ms_bio", "neuron_id", "population")
HISTORY_COLUMNS = ("generation", "best_fitness", "mean_fitness")
WITHIN_RADIUS = 1000.0


class UsageError(ValueError):
    """Bad command line, configuration or empty input."""


# ---------------------------------------------------------------- statistics

@dataclass(frozen=True)
class SummaryStats:
    """Aggregate homing statistics; distances in unit steps."""

    n_journeys: int
    mean_dx: float
    mean_dy: float
    std_dx: float
    std_dy: float
    overlap_fraction: float
    within_1000_fraction: float
    median_outbound_radius: float
    mean_return_deviation: float
    mean_return_deviation_pct: float
    mean_looping_radius: float
    d_overlap: float
    n_failed: int = 0

    def to_dict(self) -> dict:
        return {"schema": STATS_SCHEMA, **dataclasses.asdict(self)}


def return_location(traj: Trajectory) -> np.ndarray:
    xy = traj.looping_xy()
    if len(xy) == 0:
        raise UsageError("trajectory has no looping phase")
    return xy.mean(axis=0)


def outbound_radius(traj: Trajectory) -> float:
    """Distance from home at the last recorded outbound position."""
    out = traj.xy[traj.phase == OUTBOUND]
    if len(out) == 0:
        return float(np.hypot(*traj.xy[0]))
    return float(np.hypot(*out[-1]))


def looping_radius(traj: Trajectory) -> float:
    xy = traj.looping_xy()
    return float(np.hypot(*(xy - xy.mean(axis=0)).T).mean())


def summary_stats(trajectories: Sequence[Trajectory], d_overlap: float | None = None,
                  n_failed: int = 0) -> SummaryStats:
    """Return-location statistics of a batch of journeys."""
    if len(trajectories) == 0:
        raise UsageError("summary statistics need at least one trajectory")
    d_overlap = WorldParams().v_max / 2 if d_overlap is None else float(d_overlap)
    loc = np.array([return_location(t) for t in trajectories])
    dev = np.hypot(loc[:, 0], loc[:, 1])
    radii = np.array([outbound_radius(t) for t in trajectories])
    overlap = np.array([np.hypot(*t.looping_xy().T).min() <= d_overlap for t in trajectories])
    median = float(np.median(radii))
    mean_dev = float(dev.mean())
    return SummaryStats(
        n_journeys=len(trajectories),
        mean_dx=float(loc[:, 0].mean()),
        mean_dy=float(loc[:, 1].mean()),
        std_dx=float(loc[:, 0].std()),
        std_dy=float(loc[:, 1].std()),
        overlap_fraction=float(overlap.mean()),
        within_1000_fraction=float((dev <= WITHIN_RADIUS).mean()),
        median_outbound_radius=median,
        mean_return_deviation=mean_dev,
        mean_return_deviation_pct=100.0 * mean_dev / median if median > 0 else math.inf,
        mean_looping_radius=float(np.mean([looping_radius(t) for t in trajectories])),
        d_overlap=d_overlap,
        n_failed=n_failed,
    )


# ---------------------------------------------------------------- simulation

@lru_cache(maxsize=None)
def default_calibration(mode: str) -> CalibrationTable:
    """Calibration of a mismatch-free chip, computed once per process."""
    return calibrate_network(mode)


def chip_table(config: JourneyConfig, cal: CalibrationTable | None = None) -> CalibrationTable:
    """Calibration table of the simulated chip, with the configured fixed-pattern noise."""
    base = cal if cal is not None else default_calibration(config.mode)
    if base.mode != config.mode:
        raise UsageError(f"calibration table is for {base.mode} mode, journey runs in {config.mode} mode")
    return apply_fixed_pattern_noise(base, config.noise_cv, config.noise_seed)


def journey_seed(master_seed: int, index: int) -> int:
    """Seed of journey ``index``, derived by counter so it does not depend on scheduling."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, dtype=np.uint64)[0])


def run_journey(config: JourneyConfig, genome: Genome, table: CalibrationTable, seed: int,
                record_spikes: bool = False) -> tuple[Trajectory, SpikeRecord | None]:
    """One journey on an already noisy chip table."""
    config = replace(config, seed=seed)
    rng = np.random.default_rng(seed)
    if config.mode == "rate":
        traj, _ = run_rate_journey(config, genome, rng, table.network_params())
        return traj, None
    return run_spiking_journey(config, genome, table, rng, record_spikes=record_spikes)


@dataclass
class JourneyRecord:
    index: int
    seed: int
    trajectory: Trajectory | None
    error: str | None = None


def _batch_job(args, config: JourneyConfig, genome: Genome, table: CalibrationTable) -> JourneyRecord:
    index, seed = args
    try:
        traj, _ = run_journey(config, genome, table, seed)
    except Exception as err:  # a failed journey is reported, not fatal
        return JourneyRecord(index, seed, None, f"{type(err).__name__}: {err}")
    return JourneyRecord(index, seed, traj)


def _pool_map(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def run_batch(config: JourneyConfig, genome: Genome, n_journeys: int, seed: int, workers: int = 1,
              cal: CalibrationTable | None = None, d_overlap: float | None = None
              ) -> tuple[SummaryStats, list[JourneyRecord]]:
    """``n_journeys`` independent journeys; records are ordered by journey index."""
    if n_journeys < 1:
        raise UsageError("a batch needs at least one journey")
    table = chip_table(config, cal)
    jobs = [(i, journey_seed(seed, i)) for i in range(n_journeys)]
    records = _pool_map(partial(_batch_job, config=config, genome=genome, table=table), jobs, workers)
    ok = [r.trajectory for r in records if r.error is None]
    if not ok:
        raise RuntimeError(f"all {n_journeys} journeys failed; first error: {records[0].error}")
    return summary_stats(ok, d_overlap, n_failed=n_journeys - len(ok)), records


def _fitness_job(vector: np.ndarray, seeds: tuple, config: JourneyConfig, table: CalibrationTable) -> float:
    genome = Genome.from_vector(vector)
    return fitness([run_journey(config, genome, table, s)[0] for s in seeds])


class JourneyEvaluator:
    """ES evaluator: every individual flies the generation's shared outbound seeds."""

    def __init__(self, config: JourneyConfig, table: CalibrationTable, workers: int = 1):
        self.config = config
        self.table = table
        self.workers = workers

    def __call__(self, population: np.ndarray, seeds: tuple) -> np.ndarray:
        job = partial(_fitness_job, seeds=seeds, config=self.config, table=self.table)
        return np.array(_pool_map(job, list(population), self.workers))


def run_evolution(config: JourneyConfig, es: EsConfig, seed: int, workers: int = 1,
                  cal: CalibrationTable | None = None, on_generation=None) -> EsHistory:
    table = chip_table(config, cal)
    return evolve(es, JourneyEvaluator(config, table, workers), seed, on_generation=on_generation)


def sensor_stimulus(n_updates: int, rng: np.random.Generator, world: WorldParams | None = None) -> np.ndarray:
    """Source rates (TB1, TN, background) seen along a random forced walk."""
    world = world or WorldParams()
    state = AgentState(speed=world.outbound_speed)
    rates = np.ones((n_updates, N_SOURCES))
    for t in range(n_updates):
        s = sense(state, world)
        rates[t, list(TB1_SRC)] = s.tb1
        rates[t, list(TN_SRC)] = s.tn_l, s.tn_r
        state = step_outbound(state, rng, world)
    return rates


def oracle_accumulators(config: JourneyConfig, stimulus: np.ndarray) -> np.ndarray:
    """Rate-oracle CPU4 accumulators after every update of a source-rate stimulus."""
    state = np.full(8, BASELINE)
    out = np.zeros((len(stimulus), 8))
    for t, rates in enumerate(stimulus):
        c_tb1 = COUNTS_PER_WINDOW * rates[list(TB1_SRC)]
        c_tn = COUNTS_PER_WINDOW * rates[list(TN_SRC)]
        state = np.array([cpu4_state_update(state[i], c_tn[i // 4], c_tb1[i % 4], config.h, config.k)
                          for i in range(8)])
        out[t] = state
    return out


def spiking_accumulators(config: JourneyConfig, stimulus: np.ndarray, table: CalibrationTable | None = None) -> np.ndarray:
    """Spiking supersynapse totals after every update of a source-rate stimulus."""
    config = replace(config, mode="spiking", t_stop=max(config.t_stop, (len(stimulus) + 1) * config.dt_update))
    sim = SpikingSimulation(config, Genome.primitive(), table, np.random.default_rng(config.seed),
                            record_spikes=False)
    for rates in stimulus:
        sim.source_override = rates
        sim.run_update_cycle()
    return sim.cpu4_totals[: len(stimulus)].astype(float)


def compare_integrators(config: JourneyConfig, n_stimuli: int = 20, n_updates: int = 200, seed: int = 0,
                        table: CalibrationTable | None = None) -> dict:
    """Divergence between spiking supersynapse totals and the rate oracle on shared stimuli."""
    rows = []
    for i in range(n_stimuli):
        stim = sensor_stimulus(n_updates, np.random.default_rng(journey_seed(seed, i)), config.world)
        diff = np.abs(spiking_accumulators(config, stim, table) - oracle_accumulators(config, stim))
        rows.append({"stimulus": i, "max_abs": float(diff.max()), "max_fraction_of_full_scale": float(diff.max() / 1008.0)})
    return {
        "schema": COMPARE_SCHEMA,
        "n_stimuli": n_stimuli,
        "n_updates": n_updates,
        "max_fraction_of_full_scale": max(r["max_fraction_of_full_scale"] for r in rows),
        "stimuli": rows,
    }


# ---------------------------------------------------------------- file formats

def write_trajectory_csv(path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for s, t, x, y, phi, ph in zip(traj.step, traj.t_bio_ms, traj.x, traj.y, traj.phi, traj.phase):
            w.writerow((int(s), repr(float(t)), repr(float(x)), repr(float(y)), repr(float(phi)), PHASES[ph]))


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != TRAJECTORY_COLUMNS:
            raise UsageError(f"unexpected trajectory header {header}")
        rows = list(reader)
    col = list(zip(*rows)) if rows else [()] * len(TRAJECTORY_COLUMNS)
    return Trajectory(
        step=np.array(col[0], dtype=np.int64),
        t_bio_ms=np.array(col[1], dtype=float),
        x=np.array(col[2], dtype=float),
        y=np.array(col[3], dtype=float),
        phi=np.array(col[4], dtype=float),
        phase=np.array([PHASES.index(p) for p in col[5]], dtype=np.int8),
    )


def write_spikes_csv(path, spikes: SpikeRecord) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SPIKE_COLUMNS)
        for t, n, pop in zip(spikes.t_ms, spikes.neuron_id, spikes.population):
            w.writerow((repr(float(t)), int(n), pop))


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def genome_document(genome: Genome, **meta) -> dict:
    return {"schema": GENOME_SCHEMA, "digest": genome.digest(), "weights": genome.to_vector().tolist(), **meta}


def read_genome_json(path) -> Genome:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != GENOME_SCHEMA:
        raise UsageError(f"{path}: not a genome document")
    return Genome.from_vector(doc["weights"])


def write_history_csv(path, records: Sequence[GenerationRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in records:
            w.writerow((r.generation, repr(r.best_fitness), repr(r.mean_fitness)))


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class BatchSettings:
    journeys: int = 100
    workers: int = 1
    d_overlap: float = WorldParams().v_max / 2


@dataclass(frozen=True)
class Settings:
    journey: JourneyConfig
    evolution: EsConfig
    batch: BatchSettings


def _coerce(cls, section: configparser.SectionProxy | dict) -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in section.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        default = fields[key].default
        kind = type(default) if default is not dataclasses.MISSING else float
        try:
            out[key] = int(raw) if kind is int else float(raw) if kind is float else str(raw).strip()
        except ValueError as err:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from err
    return out


def load_settings(path=None) -> Settings:
    """Read an ini-style file with sections journey, world, schedule, evolution and batch."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            parser.read(path)
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from err
    known = {"journey", "world", "schedule", "evolution", "batch"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")

    def section(name: str) -> dict:
        return dict(parser[name]) if parser.has_section(name) else {}

    try:
        world = WorldParams(**_coerce(WorldParams, section("world")))
        schedule = ScheduleConfig(**_coerce(ScheduleConfig, section("schedule")))
        journey = JourneyConfig(world=world, schedule=schedule, **_coerce(JourneyConfig, section("journey")))
        es = EsConfig(**_coerce(EsConfig, section("evolution")))
        batch = BatchSettings(**_coerce(BatchSettings, section("batch")))
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return Settings(journey, es, batch)


# ---------------------------------------------------------------- command line

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cxnav", description="Spiking path-integration simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="ini configuration file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--mode", choices=("rate", "spiking"))
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--calibration", help="calibration table JSON to use instead of a fresh calibration")
    common.add_argument("--genome", help="genome JSON to fly instead of the primitive genome")
    run = sub.add_parser("run", parents=[common], help="single journey")
    run.add_argument("--fidelity", choices=("full", "hardware16"))
    batch = sub.add_parser("batch", parents=[common], help="batch of journeys")
    batch.add_argument("--journeys", type=int)
    evolve_p = sub.add_parser("evolve", parents=[common], help="evolution strategy")
    evolve_p.add_argument("--generations", type=int)
    evolve_p.add_argument("--journeys", type=int, help="batch size for before/after statistics (0 skips)")
    sub.add_parser("calibrate", parents=[common], help="calibrate a mismatch-free chip")
    compare = sub.add_parser("compare", parents=[common], help="spiking vs rate integrator divergence")
    compare.add_argument("--journeys", type=int, help="number of stimuli")
    return parser


def _settings_from_args(args) -> Settings:
    s = load_settings(args.config)
    journey = s.journey
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("seed must be non-negative")
        journey = replace(journey, seed=args.seed)
    if args.mode is not None:
        journey = replace(journey, mode=args.mode)
    if getattr(args, "fidelity", None):
        journey = replace(journey, fidelity=args.fidelity)
    es = s.evolution
    if getattr(args, "generations", None) is not None:
        es = replace(es, generations=args.generations)
    batch = s.batch
    if args.workers is not None:
        batch = replace(batch, workers=args.workers)
    if getattr(args, "journeys", None) is not None:
        batch = replace(batch, journeys=args.journeys)
    return Settings(journey, es, batch)


def _load_calibration(args, mode: str) -> CalibrationTable | None:
    if not args.calibration:
        return None
    table = CalibrationTable.from_json(Path(args.calibration).read_text())
    if table.mode != mode:
        raise UsageError(f"calibration table is for {table.mode} mode")
    return table


def _cmd_run(args, s: Settings, out: Path) -> None:
    cfg = s.journey
    genome = read_genome_json(args.genome) if args.genome else Genome.primitive()
    table = chip_table(cfg, _load_calibration(args, cfg.mode))
    traj, spikes = run_journey(cfg, genome, table, cfg.seed, record_spikes=True)
    write_trajectory_csv(out / "trajectory.csv", traj)
    write_spikes_csv(out / "spikes.csv", spikes if spikes is not None else SpikeRecord(np.zeros(0), np.zeros(0, np.int64)))


def _cmd_batch(args, s: Settings, out: Path) -> None:
    cfg = s.journey
    genome = read_genome_json(args.genome) if args.genome else Genome.primitive()
    stats, records = run_batch(cfg, genome, s.batch.journeys, cfg.seed, s.batch.workers,
                               _load_calibration(args, cfg.mode), s.batch.d_overlap)
    doc = stats.to_dict()
    doc["failures"] = [{"index": r.index, "error": r.error} for r in records if r.error]
    write_json(out / "stats.json", doc)
    tdir = out / "trajectories"
    tdir.mkdir(exist_ok=True)
    for r in records:
        if r.trajectory is not None:
            write_trajectory_csv(tdir / f"trajectory_{r.index:05d}.csv", r.trajectory)


def _cmd_evolve(args, s: Settings, out: Path) -> None:
    cfg, es = s.journey, s.evolution
    if cfg.mode != "rate":
        raise UsageError("evolution runs in rate mode")
    cal = _load_calibration(args, cfg.mode)
    snap = out / "genomes"
    snap.mkdir(exist_ok=True)

    def on_generation(rec: GenerationRecord) -> None:
        if es.snapshot_every and rec.generation % es.snapshot_every == 0:
            write_json(snap / f"generation_{rec.generation:05d}.json",
                       genome_document(Genome.from_vector(rec.mean_genome), generation=rec.generation,
                                       best_fitness=rec.best_fitness))

    history = run_evolution(cfg, es, cfg.seed, s.batch.workers, cal, on_generation)
    write_history_csv(out / "es_history.csv", history.records)
    final = Genome.from_vector(history.records[-1].mean_genome) if history.records else Genome.primitive()
    write_json(out / "genome.json", genome_document(final, generations=len(history.records)))
    if history.best_genome is not None:
        write_json(out / "genome_best.json", genome_document(history.best_overall, fitness=history.best_fitness))
    if s.batch.journeys > 0:
        report = {"schema": STATS_SCHEMA}
        for name, genome in (("before", Genome.primitive()), ("after", final)):
            stats, _ = run_batch(cfg, genome, s.batch.journeys, cfg.seed, s.batch.workers, cal, s.batch.d_overlap)
            report[name] = stats.to_dict()
        write_json(out / "stats.json", report)


def _cmd_calibrate(args, s: Settings, out: Path) -> None:
    (out / "calibration.json").write_text(default_calibration(s.journey.mode).to_json() + "\n")


def _cmd_compare(args, s: Settings, out: Path) -> None:
    cfg = replace(s.journey, mode="spiking")
    journeys = args.journeys if args.journeys is not None else 20
    write_json(out / "compare.json", compare_integrators(cfg, journeys, seed=cfg.seed,
                                                         table=_load_calibration(args, "spiking")))


COMMANDS = {"run": _cmd_run, "batch": _cmd_batch, "evolve": _cmd_evolve, "calibrate": _cmd_calibrate,
            "compare": _cmd_compare}


def main(argv: Sequence[str] | None = None) -> int:
    """Command-line entry point; returns 0 on success, 1 on usage errors, 2 on runtime failures."""
    try:
        args = build_parser().parse_args(argv)
        settings = _settings_from_args(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as err:
        print(f"cxnav: error: {err}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, settings, out)
    except (UsageError, ConfigError) as err:
        print(f"cxnav: error: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"cxnav: failed: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
