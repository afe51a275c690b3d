"""
Alternating optimisation: beamforming (SCA), antenna positions, then semantic ratios,
repeated until the worst secrecy margin stops moving.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from beamforming_sca import (BeamformingSolution, SolverError, attach_rank_one, gaussian_randomize,
                             initial_point, margin_objective, sca_iterate)
from channel import ChannelSet, build_channels
from config import SystemConfig
from fa_opt import (FixedBlock, PositionState, benchmark_optimize, position_margins,
                    project, projected_bfgs)
from scenario import Scenario
from semantic_ratio import RatioSolution, bisection_solve, residual_budget
from semantics import MetricsReport, evaluate_metrics, process_power

logger = logging.getLogger(__name__)

POSITION_METHODS = ("bfgs", "benchmark")
MONOTONE_SLACK = 1e-6


class InfeasibleStateError(RuntimeError):
    """A sub-problem left the joint state infeasible; `trace` holds the epochs so far."""

    def __init__(self, message: str, trace: "AoTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    objective: float        # min over (k, l) of the unclamped margins
    zeta: float
    rho: np.ndarray
    u: np.ndarray
    timings: Dict[str, float]
    kkt_residual: float
    position_stalled: bool = False
    position_accepted: bool = True


@dataclass
class AoTrace:
    initial_objective: float
    epochs: List[EpochRecord] = field(default_factory=list)
    converged: bool = False
    monotone: bool = True

    def values(self) -> List[float]:
        return [self.initial_objective] + [record.objective for record in self.epochs]


class AoResult(NamedTuple):
    beamforming: BeamformingSolution
    positions: PositionState
    ratio: RatioSolution
    trace: AoTrace
    scenario: Scenario
    channels: ChannelSet


def convergence_check(trace: Union[AoTrace, Sequence[float]], varsigma: float) -> bool:
    """True when the last two objective values differ by at most varsigma."""
    values = trace.values() if isinstance(trace, AoTrace) else list(trace)
    if len(values) < 2:
        raise ValueError("convergence check needs at least two objective values")
    return abs(values[-1] - values[-2]) <= varsigma


def _initial_ratio(config: SystemConfig, optimize_rho: bool) -> RatioSolution:
    if not optimize_rho:
        return RatioSolution(np.ones(config.K), "unity", 0.0)
    floors = config.L * process_power(config.f_min, config.Q_l, config.kappa)
    budget = 0.5 * max(config.P_t - floors, 0.0)
    return bisection_solve(budget, config.nu, config.K, config.rho_lb, config.bisection_tol)


def _update_positions(scenario: Scenario, beam: BeamformingSolution, rho, method: str):
    fixed = FixedBlock(beam.W, beam.R_x, rho)
    u_old = scenario.tx.u
    if method == "bfgs":
        state, _ = projected_bfgs(u_old, fixed, scenario)
    else:
        state, _ = benchmark_optimize(u_old, fixed, scenario)
    before = float(position_margins(u_old, fixed, scenario).min())
    after = float(position_margins(state.u, fixed, scenario).min())
    return state, before, after


def run_ao(scenario: Scenario, config: Optional[SystemConfig] = None, *,
           optimize_positions: bool = True, optimize_rho: bool = True,
           position_method: str = "bfgs", initial_positions=None,
           randomize: bool = True, seed: Optional[int] = None) -> AoResult:
    """Run the three-block alternating optimisation on one scenario.

    optimize_positions=False keeps the antennas where they start (FPA and random-FA
    baselines); optimize_rho=False keeps rho at 1 (no-semantic ablation).
    """
    if position_method not in POSITION_METHODS:
        raise ValueError(f"position_method must be one of {POSITION_METHODS}, got {position_method!r}")
    if config is not None:
        scenario = replace(scenario, config=config)
    config = scenario.config
    if initial_positions is not None:
        scenario = scenario.with_tx(scenario.tx.with_positions(project(initial_positions, scenario.tx)))
    movable = optimize_positions and not scenario.tx.fixed_mask().all()

    channels = build_channels(scenario.placement, scenario.tx, scenario.rx)
    ratio = _initial_ratio(config, optimize_rho)
    rho = ratio.rho
    beam = initial_point(channels, config, rho)
    trace = AoTrace(margin_objective(channels, beam.W, beam.R_x, rho, config))
    position_state = PositionState(scenario.tx.u, np.eye(2 * scenario.tx.n), trace.initial_objective,
                                   np.zeros(2 * scenario.tx.n), objective=trace.initial_objective)
    logger.info(f"AO start (seed {scenario.seed}): min margin {trace.initial_objective:.6f}")

    previous = trace.initial_objective
    for epoch in range(1, config.max_ao_epochs + 1):
        timings = {}
        started = time.perf_counter()
        try:
            beam, _ = sca_iterate(beam, channels, rho, config)
        except SolverError as e:
            raise InfeasibleStateError(f"epoch {epoch}: beamforming sub-problem failed ({e})", trace) from e
        timings["beamforming"] = time.perf_counter() - started

        stalled, accepted = False, True
        if movable:
            started = time.perf_counter()
            try:
                state, before, after = _update_positions(scenario, beam, rho, position_method)
            except SolverError as e:
                raise InfeasibleStateError(f"epoch {epoch}: position sub-problem failed ({e})", trace) from e
            stalled = state.stalled
            if after >= before:
                scenario = scenario.with_tx(scenario.tx.with_positions(state.u))
                channels = build_channels(scenario.placement, scenario.tx, scenario.rx)
                position_state = state
            else:
                accepted = False
                logger.warning(f"Epoch {epoch}: position update lowers the worst margin "
                               f"({before:.6f} -> {after:.6f}); keeping previous positions")
            timings["positions"] = time.perf_counter() - started

        if optimize_rho:
            started = time.perf_counter()
            budget = residual_budget(config.P_t, beam.R_x, beam.f, config)
            if budget < 0:
                raise InfeasibleStateError(f"epoch {epoch}: residual power budget is negative ({budget:.4e} mW)", trace)
            candidate = bisection_solve(budget, config.nu, config.K, config.rho_lb, config.bisection_tol)
            current = margin_objective(channels, beam.W, beam.R_x, rho, config)
            proposed = margin_objective(channels, beam.W, beam.R_x, candidate.rho, config)
            if proposed >= current:
                ratio, rho = candidate, candidate.rho
            else:
                logger.debug(f"Epoch {epoch}: ratio update would lower the worst margin; keeping rho")
            timings["ratio"] = time.perf_counter() - started

        objective = margin_objective(channels, beam.W, beam.R_x, rho, config)
        trace.epochs.append(EpochRecord(epoch, objective, beam.zeta, np.array(rho), scenario.tx.u.copy(),
                                        timings, beam.kkt_residual, stalled, accepted))
        if objective < previous - MONOTONE_SLACK:
            trace.monotone = False
            logger.warning(f"Epoch {epoch}: worst margin decreased ({previous:.6f} -> {objective:.6f})")
        logger.info(f"AO epoch {epoch}: min margin {objective:.6f}, rho {float(rho[0]):.4f}")
        if convergence_check(trace, config.ao_tol):
            trace.converged = True
            break
        previous = objective

    if not trace.converged:
        logger.warning(f"AO stopped after {config.max_ao_epochs} epochs without converging")

    fixed = FixedBlock(beam.W, beam.R_x, rho)
    position_state.u = scenario.tx.u
    position_state.objective = float(position_margins(scenario.tx.u, fixed, scenario).min())

    if randomize:
        rng_seed = scenario.seed if seed is None else seed
        recovered = gaussian_randomize(beam, channels, rho, config, seed=rng_seed)
        beam = attach_rank_one(beam, recovered)
    return AoResult(beam, position_state, ratio, trace, scenario, channels)


def final_metrics(result: AoResult, rank_one: bool = True) -> MetricsReport:
    """Metrics of the AO end state, using recovered beamformers when available."""
    beam = result.beamforming
    beams = beam.w if rank_one and beam.w is not None else beam.W
    return evaluate_metrics(result.channels, beams, beam.R_x, result.ratio.rho, beam.f,
                            result.scenario.config)
