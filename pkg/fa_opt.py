"""
Fluid-antenna position optimisation.

With the beamformers, sensing covariance and semantic ratios held fixed, the worst
user/target secrecy margin is maximised over the flattened position vector
u = [x_0..x_{N-1}, z_0..z_{N-1}]. Two optimisers are provided: a projected BFGS
ascent with backtracking line search on a soft-min of the margins, and a
second-order-Taylor benchmark that solves one convex surrogate per step.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Tuple

import cvxpy as cp
import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from beamforming_sca import solve_program
from channel import entity_channel_derivatives
from config import SystemConfig
from scenario import Scenario, TxArray

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)
STATIONARY_GRAD = 1e-12


@dataclass(frozen=True)
class FixedBlock:
    """Quantities held constant while positions move."""
    W: np.ndarray     # (K, n, n)
    R_x: np.ndarray   # (n, n)
    rho: np.ndarray   # (K,)

    @classmethod
    def from_beams(cls, w: np.ndarray, R_x: np.ndarray, rho) -> "FixedBlock":
        """Build from rank-one beamformers given as the columns of w."""
        W = np.einsum("ik,jk->kij", w, w.conj())
        return cls(W, np.asarray(R_x), np.asarray(rho, float))


@dataclass(frozen=True)
class LineSearchParams:
    tau_init: float = 1.0
    shrink_factor: float = 0.5
    armijo_c: float = 1e-4
    tau_min: float = 1e-8

    def __post_init__(self):
        if not 0 < self.shrink_factor < 1:
            raise ValueError(f"shrink_factor must lie in (0, 1), got {self.shrink_factor}")
        if not 0 < self.armijo_c < 1:
            raise ValueError(f"armijo_c must lie in (0, 1), got {self.armijo_c}")
        if not 0 < self.tau_min <= self.tau_init:
            raise ValueError(f"need 0 < tau_min <= tau_init, got {self.tau_min}, {self.tau_init}")

    @classmethod
    def from_config(cls, config: SystemConfig) -> "LineSearchParams":
        return cls(config.tau_init, config.shrink_factor, config.armijo_c, config.tau_min)


class LineSearchResult(NamedTuple):
    tau: float
    u: np.ndarray
    value: float
    stalled: bool
    evaluations: int


@dataclass
class PositionState:
    u: np.ndarray
    H_inv: np.ndarray
    value: float            # optimised (smoothed) objective
    grad: np.ndarray
    epochs: int = 0
    stalled: bool = False
    objective: float = 0.0  # hard min over (k, l) of the unclamped margins
    trace: List[float] = field(default_factory=list)
    step_times: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class LogTerms:
    """log2 of the A, B, C, D terms and their gradients in u."""
    log_A: np.ndarray   # (K,)
    log_B: np.ndarray   # (K,)
    log_C: np.ndarray   # (K, L)
    log_D: np.ndarray   # (L,)
    grad_A: np.ndarray  # (K, 2n)
    grad_B: np.ndarray  # (K, 2n)
    grad_C: np.ndarray  # (K, L, 2n)
    grad_D: np.ndarray  # (L, 2n)

    def margins(self, scale: np.ndarray) -> np.ndarray:
        return scale[:, None] * ((self.log_A - self.log_B)[:, None] + self.log_C - self.log_D[None, :])

    def margin_grads(self, scale: np.ndarray) -> np.ndarray:
        """(K, L, 2n)."""
        per_user = (self.grad_A - self.grad_B)[:, None, :]
        return scale[:, None, None] * (per_user + self.grad_C - self.grad_D[None, :, :])


def _channels_at(u: np.ndarray, scenario: Scenario):
    n = scenario.tx.n
    x, z = u[:n], u[n:]
    lam = scenario.tx.wavelength
    users = [entity_channel_derivatives(*row, x, z, lam) for row in scenario.placement.users]
    targets = []
    for cluster in scenario.placement.scatterers:
        parts = [entity_channel_derivatives(*row, x, z, lam) for row in cluster]
        targets.append(tuple(sum(p[i] for p in parts) for i in range(3)))
    return users, targets


def _quad_and_grad(h, dh_x, dh_z, M) -> Tuple[float, np.ndarray]:
    """h M h^H and its gradient over [x..., z...]; element i depends on antenna i only."""
    v = M @ h.conj()
    q = float(np.real(h @ v))
    return q, np.concatenate([2.0 * np.real(dh_x * v), 2.0 * np.real(dh_z * v)])


def log_terms(u, fixed: FixedBlock, scenario: Scenario) -> LogTerms:
    u = np.asarray(u, float)
    s2 = scenario.config.sigma_c2
    users, targets = _channels_at(u, scenario)
    K, L, m = len(users), len(targets), u.size
    log_A, log_B = np.empty(K), np.empty(K)
    grad_A, grad_B = np.empty((K, m)), np.empty((K, m))
    log_C, grad_C = np.empty((K, L)), np.empty((K, L, m))
    log_D, grad_D = np.empty(L), np.empty((L, m))

    def log_and_grad(q, g):
        X = q + s2
        return math.log2(X), g / (X * LN2)

    for l, (h, dx, dz) in enumerate(targets):
        log_D[l], grad_D[l] = log_and_grad(*_quad_and_grad(h, dx, dz, fixed.R_x))
    for k, (h, dx, dz) in enumerate(users):
        interference = fixed.R_x - fixed.W[k]
        log_A[k], grad_A[k] = log_and_grad(*_quad_and_grad(h, dx, dz, fixed.R_x))
        log_B[k], grad_B[k] = log_and_grad(*_quad_and_grad(h, dx, dz, interference))
        for l, (h_l, dx_l, dz_l) in enumerate(targets):
            log_C[k, l], grad_C[k, l] = log_and_grad(*_quad_and_grad(h_l, dx_l, dz_l, interference))
    return LogTerms(log_A, log_B, log_C, log_D, grad_A, grad_B, grad_C, grad_D)


def _scale(fixed: FixedBlock, config: SystemConfig) -> np.ndarray:
    return config.iota / np.asarray(fixed.rho, float)


def position_margins(u, fixed: FixedBlock, scenario: Scenario) -> np.ndarray:
    """(K, L) unclamped secrecy margins with the antennas at u."""
    return log_terms(u, fixed, scenario).margins(_scale(fixed, scenario.config))


def fa_objective(u, fixed: FixedBlock, scenario: Scenario) -> float:
    """min_k S_k at positions u."""
    return max(float(position_margins(u, fixed, scenario).min()), 0.0)


def fa_smoothed_objective(u, fixed: FixedBlock, scenario: Scenario) -> float:
    """Soft-min -(1/beta) log sum exp(-beta s) over all (k, l) margins."""
    beta = scenario.config.softmin_beta
    s = position_margins(u, fixed, scenario).ravel()
    return float(-logsumexp(-beta * s) / beta)


def fa_gradient(u, fixed: FixedBlock, scenario: Scenario) -> np.ndarray:
    """Analytic gradient of the soft-min objective; fixed coordinates are zero."""
    beta = scenario.config.softmin_beta
    terms = log_terms(u, fixed, scenario)
    scale = _scale(fixed, scenario.config)
    s = terms.margins(scale).ravel()
    weights = np.exp(-beta * s - logsumexp(-beta * s))
    grads = terms.margin_grads(scale).reshape(s.size, -1)
    grad = weights @ grads
    grad[scenario.tx.fixed_mask()] = 0.0
    return grad


def project(u, tx: TxArray) -> np.ndarray:
    """Clamp every coordinate into its box; the centroid snaps to its nominal point."""
    lower, upper = tx.bounds()
    return np.minimum(np.maximum(np.asarray(u, float), lower), upper)


def bfgs_update(H_inv: np.ndarray, delta_u: np.ndarray, delta_grad: np.ndarray,
                curvature_eps: float = 1e-12) -> np.ndarray:
    """Rank-two inverse-Hessian update; skipped when delta_grad . delta_u <= curvature_eps."""
    s = np.atleast_1d(np.asarray(delta_u, float))
    y = np.atleast_1d(np.asarray(delta_grad, float))
    H = np.atleast_2d(np.asarray(H_inv, float))
    curvature = float(y @ s)
    if curvature <= curvature_eps:
        logger.debug(f"BFGS update skipped (curvature {curvature:.3e})")
        return H
    rho = 1.0 / curvature
    V = np.eye(s.size) - rho * np.outer(s, y)
    updated = V @ H @ V.T + rho * np.outer(s, s)
    return 0.5 * (updated + updated.T)


def backtracking_search(objective: Callable[[np.ndarray], float], u: np.ndarray, direction: np.ndarray,
                        grad: np.ndarray, params: LineSearchParams,
                        project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                        value: Optional[float] = None) -> LineSearchResult:
    """Largest tau = tau_init * shrink^n with f(P(u + tau d)) >= f(u) + c tau grad.d.

    A non-ascent direction is replaced by the gradient. If tau drops below tau_min the
    search stalls and u is returned unchanged.
    """
    u = np.asarray(u, float)
    clamp = project if project is not None else (lambda v: v)
    f0 = objective(u) if value is None else value
    evaluations = 0 if value is not None else 1
    slope = float(grad @ direction)
    if slope <= 0:
        logger.debug("Non-ascent direction, falling back to the gradient")
        direction = grad
        slope = float(grad @ grad)
    tau = params.tau_init
    while tau >= params.tau_min:
        candidate = clamp(u + tau * direction)
        f1 = objective(candidate)
        evaluations += 1
        if f1 >= f0 + params.armijo_c * tau * slope and f1 >= f0:
            return LineSearchResult(tau, candidate, f1, False, evaluations)
        tau *= params.shrink_factor
    return LineSearchResult(params.tau_min, u, f0, True, evaluations)


def _scaled_identity(size: int, g: np.ndarray, initial_step: Optional[float]) -> np.ndarray:
    """Identity, or the multiple of it whose first gradient step has length initial_step."""
    norm = float(np.linalg.norm(g))
    if initial_step is None or norm == 0.0:
        return np.eye(size)
    return (initial_step / norm) * np.eye(size)


def projected_bfgs_maximize(fun: Callable, grad: Callable, u0, lower: np.ndarray, upper: np.ndarray,
                            params: LineSearchParams, max_epochs: int, tol: float = 1e-6,
                            curvature_eps: float = 1e-12,
                            fixed_mask: Optional[np.ndarray] = None,
                            initial_step: Optional[float] = None) -> PositionState:
    """Box-constrained BFGS ascent.

    The inverse Hessian starts as the identity, or as a scaled identity when initial_step
    is given, and is rescaled by s.y / y.y before the first rank-two update. A line
    search that stalls on a quasi-Newton direction is retried once along the scaled
    gradient before the run is declared stalled.
    """
    fixed_mask = np.zeros(len(lower), bool) if fixed_mask is None else fixed_mask
    clamp = lambda v: np.minimum(np.maximum(v, lower), upper)
    u = clamp(np.asarray(u0, float))
    value = fun(u)
    g = np.where(fixed_mask, 0.0, grad(u))
    H = _scaled_identity(u.size, g, initial_step)
    state = PositionState(u, H, value, g, trace=[value])
    updated = False

    for epoch in range(1, max_epochs + 1):
        started = time.perf_counter()
        if np.linalg.norm(clamp(u + g) - u) < tol:
            break
        blocked = fixed_mask | ((u <= lower) & (g < 0)) | ((u >= upper) & (g > 0))
        direction = np.where(blocked, 0.0, H @ g)
        if float(g @ direction) <= 0:
            logger.debug(f"Epoch {epoch}: BFGS direction not ascent, resetting H_inv")
            H, updated = _scaled_identity(u.size, g, initial_step), False
            direction = np.where(blocked, 0.0, H @ g)
        search = backtracking_search(fun, u, direction, g, params, clamp, value)
        if search.stalled and updated:
            logger.debug(f"Epoch {epoch}: line search stalled, retrying along the gradient")
            H, updated = _scaled_identity(u.size, g, initial_step), False
            search = backtracking_search(fun, u, np.where(blocked, 0.0, H @ g), g, params, clamp, value)
        if search.stalled:
            state.stalled = True
            logger.debug(f"Epoch {epoch}: line search stalled at tau_min")
            break
        g_new = np.where(fixed_mask, 0.0, grad(search.u))
        s, y = search.u - u, -(g_new - g)
        curvature = float(s @ y)
        if not updated and curvature > curvature_eps:
            H = (curvature / float(y @ y)) * np.eye(u.size)
        H = bfgs_update(H, s, y, curvature_eps)
        updated = updated or curvature > curvature_eps
        u, value, g = search.u, search.value, g_new
        state.epochs = epoch
        state.trace.append(value)
        state.step_times.append(time.perf_counter() - started)

    state.u, state.H_inv, state.value, state.grad = u, H, value, g
    return state


def projected_bfgs(u0, fixed: FixedBlock, scenario: Scenario, params: Optional[LineSearchParams] = None,
                   max_epochs: Optional[int] = None) -> Tuple[PositionState, List[float]]:
    """Maximise the soft-min margin over the FA boxes; returns the final state and value trace.

    The search runs on positions measured in wavelengths; the returned state is in metres.
    """
    config = scenario.config
    params = LineSearchParams.from_config(config) if params is None else params
    max_epochs = config.max_bfgs_epochs if max_epochs is None else max_epochs
    lam = scenario.tx.wavelength
    lower, upper = scenario.tx.bounds()
    state = projected_bfgs_maximize(
        lambda v: fa_smoothed_objective(lam * v, fixed, scenario),
        lambda v: lam * fa_gradient(lam * v, fixed, scenario),
        np.asarray(u0, float) / lam, lower / lam, upper / lam, params, max_epochs,
        config.bfgs_tol, config.curvature_eps, scenario.tx.fixed_mask(), config.bfgs_initial_step,
    )
    state.u = project(u0 if state.epochs == 0 else lam * state.u, scenario.tx)
    state.grad = state.grad / lam
    state.H_inv = lam ** 2 * state.H_inv
    state.objective = float(position_margins(state.u, fixed, scenario).min())
    logger.debug(f"Projected BFGS: {state.epochs} epochs, soft-min {state.value:.6f}, hard min {state.objective:.6f}")
    return state, state.trace


def _curvature_bounds(u: np.ndarray, fixed: FixedBlock, scenario: Scenario, free: np.ndarray):
    """Per-term max-eigenvalue curvature scalars from finite-difference Hessians."""
    step = scenario.config.grad_fd_step
    idx = np.flatnonzero(free)
    cols = {name: [] for name in ("A", "B", "C", "D")}
    for j in idx:
        plus, minus = u.copy(), u.copy()
        plus[j] += step
        minus[j] -= step
        tp, tm = log_terms(plus, fixed, scenario), log_terms(minus, fixed, scenario)
        for name in cols:
            diff = (getattr(tp, f"grad_{name}") - getattr(tm, f"grad_{name}"))[..., idx]
            cols[name].append(diff / (2.0 * step))

    def lam_max(stacked, sign):
        # stacked: (..., m, m) with the differentiated coordinate last
        H = np.moveaxis(np.array(stacked), 0, -1)
        H = 0.5 * (H + np.swapaxes(H, -1, -2))
        flat = H.reshape(-1, H.shape[-2], H.shape[-1])
        values = np.array([linalg.eigvalsh(sign * M)[-1] for M in flat])
        return np.maximum(values, 0.0).reshape(H.shape[:-2])

    # +log A and +log C need a lower curvature bound, -log B and -log D an upper one
    return (lam_max(cols["A"], -1.0), lam_max(cols["B"], 1.0),
            lam_max(cols["C"], -1.0), lam_max(cols["D"], 1.0))


def benchmark_step(u_e, fixed: FixedBlock, scenario: Scenario) -> np.ndarray:
    """One update of the second-order-Taylor benchmark.

    Each margin is replaced by s(u_e) + grad s . D - (M/2) |D|^2 with M built from the
    max eigenvalues of the log-term Hessians, and the worst surrogate is maximised over
    the boxes.
    """
    config = scenario.config
    u_e = project(u_e, scenario.tx)
    lower, upper = scenario.tx.bounds()
    free = ~scenario.tx.fixed_mask()
    scale = _scale(fixed, config)
    terms = log_terms(u_e, fixed, scenario)
    margins = terms.margins(scale)
    grads = terms.margin_grads(scale)[..., free]
    if not free.any() or np.max(np.abs(grads)) < STATIONARY_GRAD:
        return u_e

    eps_A, delta_B, eps_C, delta_D = _curvature_bounds(u_e, fixed, scenario, free)
    curvature = scale[:, None] * ((eps_A + delta_B)[:, None] + eps_C + delta_D[None, :])

    # optimise over wavelength-scaled displacements
    lam = scenario.tx.wavelength
    step = cp.Variable(int(free.sum()))
    t = cp.Variable()
    lo, hi = (lower[free] - u_e[free]) / lam, (upper[free] - u_e[free]) / lam
    constraints = [step >= lo, step <= hi]
    K, L = margins.shape
    for k in range(K):
        for l in range(L):
            constraints.append(t <= margins[k, l] + lam * grads[k, l] @ step
                               - 0.5 * curvature[k, l] * lam ** 2 * cp.sum_squares(step))
    problem = cp.Problem(cp.Maximize(t), constraints)
    solve_program(problem, config.solver, config.kkt_tol)
    u = u_e.copy()
    u[free] = u_e[free] + lam * np.asarray(step.value)
    return project(u, scenario.tx)


def benchmark_optimize(u0, fixed: FixedBlock, scenario: Scenario,
                       max_epochs: Optional[int] = None) -> Tuple[PositionState, List[float]]:
    """Repeat benchmark_step while the hard-min margin improves."""
    config = scenario.config
    max_epochs = config.max_bfgs_epochs if max_epochs is None else max_epochs
    u = project(u0, scenario.tx)
    value = float(position_margins(u, fixed, scenario).min())
    state = PositionState(u, np.eye(u.size), value, np.zeros(u.size), objective=value, trace=[value])
    for epoch in range(1, max_epochs + 1):
        started = time.perf_counter()
        candidate = benchmark_step(u, fixed, scenario)
        candidate_value = float(position_margins(candidate, fixed, scenario).min())
        state.step_times.append(time.perf_counter() - started)
        if candidate_value <= value:
            break
        gain = candidate_value - value
        u, value = candidate, candidate_value
        state.epochs = epoch
        state.trace.append(value)
        if gain < config.bfgs_tol:
            break
    state.u, state.value, state.objective = u, value, value
    return state, state.trace
