"""
Semantic extraction ratio allocation by bisection under the residual power budget.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from config import SystemConfig
from semantics import cs_power, process_power

logger = logging.getLogger(__name__)

MAX_BISECTION_STEPS = 200


@dataclass(frozen=True)
class RatioSolution:
    rho: np.ndarray
    binding: str  # "budget", "lower_bound" or "unity"
    residual: float
    iterations: int = 0
    gap: float = 0.0  # |-nu sum ln rho - residual| at the returned ratio

    @property
    def common(self) -> float:
        return float(self.rho[0])


def residual_budget(P_t: float, R_x: np.ndarray, f_l, config: SystemConfig) -> float:
    """Power left for semantic extraction: P_t - Tr(R_x) - sum_l kappa f_l^3 Q_l.

    A negative value means the beamforming state is infeasible.
    """
    processing = float(np.sum(process_power(np.asarray(f_l, float), config.Q_l, config.kappa)))
    residual = P_t - cs_power(R_x) - processing
    if residual < 0:
        logger.warning(f"Residual budget is negative ({residual:.4e} mW)")
    return residual


def bisection_solve(C: float, nu: float, K: int, rho_lb: float, tol: float = 1e-8) -> RatioSolution:
    """Smallest common ratio rho with -nu K ln(rho) <= C, clamped to [rho_lb, 1].

    Bisection stops once |-nu K ln(rho) - C| <= tol and the bracket is narrower than tol.
    The bracket keeps `hi` on the feasible side, so the returned ratio never overspends C.
    """
    if C < 0:
        raise ValueError(f"residual budget must be >= 0, got {C}")
    if not 0 < rho_lb <= 1:
        raise ValueError(f"rho_LB must lie in (0, 1], got {rho_lb}")

    def excess(rho: float) -> float:
        return -nu * K * math.log(rho) - C

    if C == 0 or rho_lb == 1:
        return RatioSolution(np.ones(K), "unity", C, gap=C)
    if excess(rho_lb) <= 0:
        return RatioSolution(np.full(K, rho_lb), "lower_bound", C, gap=-excess(rho_lb))

    lo, hi = rho_lb, 1.0
    steps = 0
    while (-excess(hi) > tol or hi - lo > tol) and steps < MAX_BISECTION_STEPS:
        mid = 0.5 * (lo + hi)
        if excess(mid) <= 0:
            hi = mid
        else:
            lo = mid
        steps += 1
    gap = abs(excess(hi))
    if gap > tol:
        logger.warning(f"Bisection stopped after {steps} steps with constraint residual {gap:.2e}")
    logger.debug(f"Bisection converged to rho={hi:.10f} in {steps} steps")
    return RatioSolution(np.full(K, hi), "budget", C, steps, gap)
