#!/usr/bin/env python3
"""
Seeded experiment sweeps over the joint design: convergence traces, per-antenna gain,
LS-estimator MSE against the CRB, secrecy against the CRB limit, the compute/latency
trade-off, antenna-count scaling, information efficiency and position-optimiser run time.
Results go to CSV.
"""

import argparse
import csv
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ao_pipeline import POSITION_METHODS, AoResult, final_metrics, run_ao
from beamforming_sca import initial_point, sca_iterate
from channel import build_channels
from config import RESULT_FIELDS, RESULTS_DIR, ConfigError, ResultRow, SystemConfig, get_default_config, load_config
from scenario import Scenario, build_scenario, sample_positions
from semantics import MetricsReport
from sensing import monte_carlo_mse

logger = logging.getLogger(__name__)

EXPERIMENTS = (
    "convergence",
    "per-antenna-gain",
    "mse-vs-crb",
    "ssr-vs-crb",
    "compute-tradeoff",
    "antenna-scaling",
    "info-efficiency",
    "computation-time",
)

DEFAULT_GRIDS: Dict[str, Tuple[float, ...]] = {
    "convergence": (0.02, 0.05, 0.1),
    "per-antenna-gain": (0.0, 0.02, 0.05, 0.1),
    "mse-vs-crb": (0.3, 0.5, 0.8, 1.0),
    "ssr-vs-crb": (0.3, 0.5, 0.8, 1.0),
    "compute-tradeoff": (0.1, 0.2, 0.3, 0.4, 0.5),
    "antenna-scaling": (3, 4),
    "info-efficiency": (0.0, 0.02, 0.05, 0.1),
    "computation-time": (0.02, 0.05, 0.1),
}

# movable range sweeps (m): box area r^2 on a grid of pitch max(r, MIN_TX_PITCH)
RANGE_EXPERIMENTS = ("convergence", "per-antenna-gain", "info-efficiency", "computation-time")
MIN_TX_PITCH = 0.05
# (T_max in s, Q_l in cycles/bit)
COMPUTE_VARIANTS = ((0.1, 110.0), (0.1, 150.0), (0.05, 110.0))
# (targets L, n_tx, n_tz) compared on the secrecy-vs-CRB sweep
SSR_CRB_VARIANTS = ((1, 3, 3), (3, 3, 3), (3, 5, 3))
MSE_TRIALS = 500
RANDOM_FA_OFFSET = 10_000


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    grid: Tuple[float, ...]
    seeds: Tuple[int, ...]
    out: Optional[Path] = None
    no_semantic: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if not self.grid:
            raise ValueError("grid must not be empty")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class Job:
    experiment: str
    seed: int
    sweep_value: float
    config: SystemConfig
    no_semantic: bool = False


def make_row(experiment: str, seed: int, sweep_value: float, metric: str, value: float,
             wall_time: float, status: str = "ok") -> ResultRow:
    return ResultRow(experiment=experiment, seed=seed, sweep_value=float(sweep_value), metric=metric,
                     value=float(value), wall_time=float(wall_time), status=status)


def configure(experiment: str, value: float, config: SystemConfig, no_semantic: bool = False) -> SystemConfig:
    """Apply one grid point (and the no-semantic ablation) to the base config."""
    overrides = {}
    if no_semantic:
        overrides["iota"] = 1.0
    if experiment in RANGE_EXPERIMENTS:
        overrides.update(C_i=value ** 2, tx_pitch=max(value, MIN_TX_PITCH))
    elif experiment in ("mse-vs-crb", "ssr-vs-crb"):
        overrides["xi"] = value
    elif experiment == "compute-tradeoff":
        overrides["U_l"] = value * 1e6
    elif experiment == "antenna-scaling":
        side = int(round(value))
        overrides.update(n_tx=side, n_tz=side)
    return config.with_overrides(**overrides)


def per_antenna_gain(s_fa: float, s_fpa: float, n_t: int) -> float:
    """100 (S_FA - S_FPA) / (S_FPA n_t); zero when the two coincide."""
    if s_fa == s_fpa:
        return 0.0
    if s_fpa <= 0:
        return math.nan
    return 100.0 * (s_fa - s_fpa) / (s_fpa * n_t)


def baseline_fpa(scenario: Scenario, config: Optional[SystemConfig] = None, optimize_rho: bool = True) -> MetricsReport:
    """AO with every antenna frozen at its nominal grid point."""
    return final_metrics(run_ao(scenario, config, optimize_positions=False, optimize_rho=optimize_rho))


def baseline_random_fa(scenario: Scenario, config: Optional[SystemConfig] = None, seed: int = 0,
                       optimize_rho: bool = True) -> MetricsReport:
    """AO with antennas drawn uniformly inside their boxes and never moved."""
    u = sample_positions(scenario.tx, np.random.default_rng(seed))
    return final_metrics(run_ao(scenario, config, optimize_positions=False, optimize_rho=optimize_rho,
                                initial_positions=u))


def _fa(scenario: Scenario, method: str, optimize_rho: bool) -> AoResult:
    return run_ao(scenario, optimize_positions=True, optimize_rho=optimize_rho, position_method=method)


def _method_metrics(scenario: Scenario, seed: int, optimize_rho: bool) -> Dict[str, MetricsReport]:
    return {
        "bfgs": final_metrics(_fa(scenario, "bfgs", optimize_rho)),
        "benchmark": final_metrics(_fa(scenario, "benchmark", optimize_rho)),
        "random_fa": baseline_random_fa(scenario, seed=seed + RANDOM_FA_OFFSET, optimize_rho=optimize_rho),
        "fpa": baseline_fpa(scenario, optimize_rho=optimize_rho),
    }


def _convergence(job: Job, scenario: Scenario, optimize_rho: bool) -> List[Tuple[str, float]]:
    result = _fa(scenario, "bfgs", optimize_rho)
    return [(f"min_ssr@epoch{record.epoch}", max(record.objective, 0.0)) for record in result.trace.epochs]


def _gain(job: Job, scenario: Scenario, optimize_rho: bool) -> List[Tuple[str, float]]:
    metrics = _method_metrics(scenario, job.seed, optimize_rho)
    s_fpa = metrics["fpa"].min_secrecy
    rows = [(f"ssr_{name}", report.min_secrecy) for name, report in metrics.items()]
    rows += [(f"gain_{name}", per_antenna_gain(metrics[name].min_secrecy, s_fpa, scenario.config.n_t))
             for name in ("bfgs", "benchmark", "random_fa")]
    return rows


def _info_efficiency(job: Job, scenario: Scenario, optimize_rho: bool) -> List[Tuple[str, float]]:
    metrics = _method_metrics(scenario, job.seed, optimize_rho)
    rows = []
    for name, report in metrics.items():
        valid = report.efficiency[~np.isnan(report.efficiency)]
        rows.append((f"efficiency_{name}", float(valid.mean()) if valid.size else math.nan))
    return rows


def _mse(job: Job, scenario: Scenario, optimize_rho: bool) -> List[Tuple[str, float]]:
    config = scenario.config
    channels = build_channels(scenario.placement, scenario.tx, scenario.rx)
    rho = np.ones(config.K)
    beam, _ = sca_iterate(initial_point(channels, config, rho), channels, rho, config)
    report = monte_carlo_mse(channels.G, beam.R_x, config.sigma_r2, config.F, MSE_TRIALS, job.seed)
    return [("mse", report.mse), ("crb", report.crb), ("mse_crb_ratio", report.ratio)]


def _ssr_vs_crb(job: Job, scenario: Scenario, optimize_rho: bool) -> List[Tuple[str, float]]:
    rows = [
        ("ssr_bfgs", final_metrics(_fa(scenario, "bfgs", optimize_rho)).min_secrecy),
        ("ssr_random_fa", baseline_random_fa(scenario, seed=job.seed + RANDOM_FA_OFFSET,
                                             optimize_rho=optimize_rho).min_secrecy),
        ("ssr_fpa", baseline_fpa(scenario, optimize_rho=optimize_rho).min_secrecy),
    ]
    for L, n_tx, n_tz in SSR_CRB_VARIANTS:
        variant = build_scenario(scenario.config.with_overrides(L=L, n_tx=n_tx, n_tz=n_tz), job.seed)
        label = f"L{L}_N{n_tx * n_tz}"
        rows.append((f"ssr_bfgs_{label}", final_metrics(_fa(variant, "bfgs", optimize_rho)).min_secrecy))
        if optimize_rho and L == 1:
            plain = build_scenario(variant.config.with_overrides(iota=1.0), job.seed)
            rows.append((f"ssr_bfgs_{label}_no_semantic", final_metrics(_fa(plain, "bfgs", False)).min_secrecy))
    return rows


def _compute_tradeoff(job: Job, scenario: Scenario, optimize_rho: bool) -> List[Tuple[str, float]]:
    rows = []
    for T_max, Q_l in COMPUTE_VARIANTS:
        variant = scenario.config.with_overrides(T_max=T_max, Q_l=Q_l)
        result = run_ao(scenario, variant, optimize_rho=optimize_rho)
        label = f"T{T_max:g}_Q{Q_l:g}"
        rows.append((f"ssr_{label}", final_metrics(result).min_secrecy))
        rows.append((f"rho_{label}", result.ratio.common))
    return rows


def _antenna_scaling(job: Job, scenario: Scenario, optimize_rho: bool) -> List[Tuple[str, float]]:
    config = scenario.config
    dense = config.with_overrides(C_i=0.0, tx_pitch=config.wavelength / 2)
    return [
        ("ssr_fa_bfgs", final_metrics(_fa(scenario, "bfgs", optimize_rho)).min_secrecy),
        ("ssr_fpa_sparse", baseline_fpa(scenario, optimize_rho=optimize_rho).min_secrecy),
        ("ssr_fpa_dense", baseline_fpa(build_scenario(dense, job.seed), optimize_rho=optimize_rho).min_secrecy),
    ]


def _computation_time(job: Job, scenario: Scenario, optimize_rho: bool) -> List[Tuple[str, float]]:
    rows = []
    for method in POSITION_METHODS:
        result = _fa(scenario, method, optimize_rho)
        epochs = [record.timings["positions"] for record in result.trace.epochs if "positions" in record.timings]
        steps = result.positions.step_times
        rows.append((f"time_{method}_epoch", float(np.mean(epochs)) if epochs else math.nan))
        rows.append((f"time_{method}_step", float(np.mean(steps)) if steps else math.nan))
        rows.append((f"steps_{method}", float(result.positions.epochs)))
        rows.append((f"ssr_{method}", final_metrics(result).min_secrecy))
    return rows


RUNNERS = {
    "convergence": _convergence,
    "per-antenna-gain": _gain,
    "mse-vs-crb": _mse,
    "ssr-vs-crb": _ssr_vs_crb,
    "compute-tradeoff": _compute_tradeoff,
    "antenna-scaling": _antenna_scaling,
    "info-efficiency": _info_efficiency,
    "computation-time": _computation_time,
}


def run_job(job: Job) -> List[ResultRow]:
    """One (seed, grid point); failures come back as a single failed row."""
    started = time.perf_counter()
    try:
        config = configure(job.experiment, job.sweep_value, job.config, job.no_semantic)
        scenario = build_scenario(config, job.seed)
        values = RUNNERS[job.experiment](job, scenario, not job.no_semantic)
    except Exception as e:
        logger.error(f"{job.experiment} seed={job.seed} value={job.sweep_value:g} failed: {e}")
        return [make_row(job.experiment, job.seed, job.sweep_value, "error", math.nan,
                         time.perf_counter() - started, "failed")]
    elapsed = time.perf_counter() - started
    logger.info(f"{job.experiment} seed={job.seed} value={job.sweep_value:g} done in {elapsed:.1f}s")
    return [make_row(job.experiment, job.seed, job.sweep_value, metric, value, elapsed)
            for metric, value in values]


def run_experiment(spec: ExperimentSpec, config: SystemConfig) -> List[ResultRow]:
    """Run every (seed, grid point) of the sweep; rows come back in submission order."""
    jobs = [Job(spec.experiment, seed, value, config, spec.no_semantic)
            for value in spec.grid for seed in spec.seeds]
    logger.info(f"Running {spec.experiment}: {len(jobs)} jobs on {spec.workers} worker(s)")
    if spec.workers == 1:
        batches = [run_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            batches = list(pool.map(run_job, jobs))
    return [row for batch in batches for row in batch]


def _format(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def emit_csv(rows: Sequence[ResultRow], path) -> Path:
    """Write rows with a header in the fixed ResultRow column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({name: _format(row[name]) for name in RESULT_FIELDS})
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


def parse_seeds(text: str) -> Tuple[int, ...]:
    """'7' or an inclusive range '3..7'."""
    if ".." in text:
        start, _, stop = text.partition("..")
        first, last = int(start), int(stop)
        if last < first:
            raise ValueError(f"empty seed range {text!r}")
        return tuple(range(first, last + 1))
    return (int(text),)


def parse_grid(text: str) -> Tuple[float, ...]:
    values = tuple(float(item) for item in text.split(",") if item.strip())
    if not values:
        raise ValueError("grid must not be empty")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Run seeded NF-ISCSC experiment sweeps and write CSV results.")
    subparsers = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sub = subparsers.add_parser(name, help=f"{name} sweep")
        sub.add_argument("--config", help="Path to a JSON config file (defaults when omitted)")
        seeds = sub.add_mutually_exclusive_group()
        seeds.add_argument("--seed", type=int, help="Single seed")
        seeds.add_argument("--seeds", help="Inclusive seed range N..M")
        sub.add_argument("--out", help=f"Output CSV (default: {RESULTS_DIR}/{name}.csv)")
        sub.add_argument("--grid", help="Comma-separated sweep values")
        sub.add_argument("--no-semantic", action="store_true", help="Fix rho at 1 and iota at 1")
        sub.add_argument("--workers", type=int, default=1, help="Parallel worker processes")
        sub.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def main(argv: Optional[Sequence[str]] = None):
    logging.basicConfig(level=logging.INFO, format='%(levelname)s: %(message)s')
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        config = load_config(args.config) if args.config else get_default_config()
        if args.seeds:
            seeds = parse_seeds(args.seeds)
        else:
            seeds = (args.seed if args.seed is not None else config.rng_seed,)
        grid = parse_grid(args.grid) if args.grid else DEFAULT_GRIDS[args.experiment]
        out = Path(args.out) if args.out else Path(RESULTS_DIR) / f"{args.experiment}.csv"
        spec = ExperimentSpec(args.experiment, grid, seeds, out, args.no_semantic, args.workers)
    except (ConfigError, ValueError, OSError) as e:
        logger.error(f"Invalid arguments: {e}")
        sys.exit(1)

    rows = run_experiment(spec, config)
    try:
        emit_csv(rows, spec.out)
    except OSError as e:
        logger.error(f"Failed to write {spec.out}: {e}")
        sys.exit(1)
    if rows and all(row["status"] == "failed" for row in rows):
        logger.error("Every run failed")
        sys.exit(1)


if __name__ == "__main__":
    main()
