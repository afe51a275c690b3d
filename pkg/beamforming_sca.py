"""
Joint beamforming and CPU allocation sub-problem.

The relaxed problem optimises PSD beamformer covariances W_k, the sensing covariance
R = R_x - sum_k W_k and per-target CPU frequencies f_l. The two convex log terms of each
user/target secrecy margin are linearised around the previous iterate (SCA), the CRB
limit enters through a Schur-complement epigraph and the cubic processing power through
a power-cone epigraph. Rank-one beamformers are recovered by Gaussian randomisation.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import cvxpy as cp
import numpy as np
from scipy import linalg

from channel import ChannelSet
from config import SOLVER_CHAIN, SystemConfig
from semantics import compute_power, cs_power, process_power, secrecy_margins
from sensing import crb_extended

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)
GHZ = 1e9
ACTIVE_RTOL = 1e-4
INFEASIBLE_STATUSES = (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE, cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE)
# solver stopping tolerance relative to the reported kkt_tol
SOLVER_TOL_FACTOR = 0.1
RECOVERY_RTOL = 1e-6


class SolverError(RuntimeError):
    """Raised when a convex program is infeasible, unbounded or cannot be solved."""

    def __init__(self, message: str, status: Optional[str] = None):
        super().__init__(message)
        self.status = status


def form_matrix(h: np.ndarray) -> np.ndarray:
    """M with Tr(M W) = h W h^H."""
    return np.outer(h.conj(), h)


def quad_trace(M: np.ndarray, X: np.ndarray) -> float:
    return float(np.real(np.einsum("ij,ji->", M, X)))


def project_psd(X: np.ndarray) -> np.ndarray:
    X = 0.5 * (X + X.conj().T)
    eigvals, vecs = linalg.eigh(X)
    return (vecs * np.clip(eigvals, 0.0, None)) @ vecs.conj().T


@dataclass(frozen=True)
class LinearizedTerms:
    """Quadratic-form matrices of the SINR terms and the expansion-point values.

    With U_k = h_k^H h_k and T_l = h_l^H h_l:
        A_k   = Tr(U_k R_x) + s2          B_k   = A_k - Tr(U_k W_k)
        C_l|k = Tr(T_l R_x) - Tr(T_l W_k) + s2,   D_l|k = Tr(T_l R_x) + s2
    and the exact margin log-difference is log2 A - log2 B + log2 C - log2 D.
    """
    user_forms: np.ndarray    # (K, n, n)
    target_forms: np.ndarray  # (L, n, n)
    sigma2: float
    B_e: np.ndarray           # (K,)
    D_e: np.ndarray           # (K, L)

    @property
    def K(self) -> int:
        return self.user_forms.shape[0]

    @property
    def L(self) -> int:
        return self.target_forms.shape[0]

    @property
    def n(self) -> int:
        return self.user_forms.shape[1]

    def terms(self, W: np.ndarray, R_x: np.ndarray):
        s2 = self.sigma2
        A = np.array([quad_trace(U, R_x) for U in self.user_forms]) + s2
        B = A - np.array([quad_trace(U, W[k]) for k, U in enumerate(self.user_forms)])
        target_total = np.array([quad_trace(T, R_x) for T in self.target_forms])
        C = np.array([[target_total[l] - quad_trace(T, W[k]) + s2 for l, T in enumerate(self.target_forms)]
                      for k in range(self.K)])
        D = np.tile(target_total + s2, (self.K, 1))
        return A, B, C, D

    def exact(self, W: np.ndarray, R_x: np.ndarray) -> np.ndarray:
        """(K, L) exact log-differences."""
        A, B, C, D = self.terms(W, R_x)
        return (np.log2(A) - np.log2(B))[:, None] + np.log2(C) - np.log2(D)

    def minorant(self, W: np.ndarray, R_x: np.ndarray) -> np.ndarray:
        """(K, L) surrogate with log2 B and log2 D replaced by their tangents."""
        A, B, C, D = self.terms(W, R_x)
        upper_B = np.log2(self.B_e) + (B - self.B_e) / (self.B_e * LN2)
        upper_D = np.log2(self.D_e) + (D - self.D_e) / (self.D_e * LN2)
        return (np.log2(A) - upper_B)[:, None] + np.log2(C) - upper_D


@dataclass(frozen=True)
class BeamformingSolution:
    W: np.ndarray                 # (K, n, n) relaxed covariances
    R_x: np.ndarray
    R: np.ndarray
    f: np.ndarray                 # (L,) Hz
    zeta: float
    objective: float              # exact min_k,l margin at the solution
    kkt_residual: float = 0.0
    converged: bool = True
    status: str = cp.OPTIMAL
    active_constraints: Tuple[str, ...] = ()
    w: Optional[np.ndarray] = None          # (n, K) recovered rank-one beamformers
    recovered_objective: Optional[float] = None


@dataclass
class ConvexProgram:
    problem: cp.Problem
    W: List[cp.Variable]
    R: cp.Variable
    f: cp.Variable
    zeta: cp.Variable
    terms: LinearizedTerms
    config: SystemConfig
    rho: np.ndarray
    crb_bound: float
    fixed_power: float


@dataclass(frozen=True)
class RandomizationResult:
    w: np.ndarray
    R: np.ndarray
    objective: float
    success: bool
    samples: int
    relaxed_objective: float = math.nan  # exact worst margin of the relaxed solution


def margin_objective(channels: ChannelSet, W: np.ndarray, R_x: np.ndarray, rho, config: SystemConfig) -> float:
    """Exact min over (k, l) of the unclamped secrecy margin."""
    return float(secrecy_margins(channels.users, channels.targets, W, R_x, rho,
                                 config.iota, config.sigma_c2).min())


def linearize(channels: ChannelSet, W_e: np.ndarray, R_x_e: np.ndarray, sigma2: float) -> LinearizedTerms:
    """Build the SCA surrogate around the expansion point (W_e, R_x_e)."""
    user_forms = np.array([form_matrix(h) for h in channels.users])
    target_forms = np.array([form_matrix(h) for h in channels.targets])
    draft = LinearizedTerms(user_forms, target_forms, sigma2,
                            np.ones(channels.K), np.ones((channels.K, channels.L)))
    _, B, _, D = draft.terms(W_e, R_x_e)
    if np.any(B <= 0) or np.any(D <= 0):
        raise ValueError("expansion point gives non-positive interference terms")
    return replace(draft, B_e=B, D_e=D)


def crb_epigraph(R_x_expr, n: int, bound: float):
    """Y >= R_x^-1 with Tr(Y) <= bound through a 2n x 2n PSD block.

    The block is [[Y / bound, I / sqrt(bound)], [I / sqrt(bound), R_x]], so its upper-left
    trace is at most one whatever the magnitude of the bound.
    """
    block = cp.Variable((2 * n, 2 * n), hermitian=True)
    Y = bound * block[:n, :n]
    constraints = [
        block >> 0,
        block[:n, n:] == np.eye(n) / math.sqrt(bound),
        block[n:, n:] == R_x_expr,
        cp.real(cp.trace(block[:n, :n])) <= 1.0,
    ]
    return Y, constraints


def crb_trace_bound(config: SystemConfig) -> float:
    """Largest Tr(R_x^-1) compatible with the CRB limit xi."""
    return config.F * config.xi / (config.sigma_r2 * config.n_r)


def assemble_subproblem(terms: LinearizedTerms, config: SystemConfig, rho, channels: Optional[ChannelSet] = None) -> ConvexProgram:
    """cvxpy model of the relaxed sub-problem at fixed rho and antenna positions."""
    rho = np.asarray(rho, float)
    K, L, n = terms.K, terms.L, terms.n
    f_floor = config.f_min
    if L * f_floor > config.F_max:
        raise SolverError(f"latency floors need {L * f_floor:.3e} Hz > F_max = {config.F_max:.3e} Hz", "infeasible")
    fixed_power = compute_power(rho, config.nu)
    floor_power = fixed_power + L * process_power(f_floor, config.Q_l, config.kappa)
    if floor_power >= config.P_t:
        raise SolverError(f"compute and processing floors need {floor_power:.3e} mW >= P_t", "infeasible")

    W = [cp.Variable((n, n), hermitian=True, name=f"W{k}") for k in range(K)]
    R = cp.Variable((n, n), hermitian=True, name="R")
    R_x = R + sum(W)
    zeta = cp.Variable(name="zeta")
    f = cp.Variable(L, name="f_ghz")
    t = cp.Variable(L, name="t_process")
    # every SINR term is divided by the noise power; the log-differences are unchanged
    s2 = terms.sigma2

    constraints = [Wk >> 0 for Wk in W] + [R >> 0]
    for k in range(K):
        U = terms.user_forms[k] / s2
        A = cp.real(cp.trace(U @ R_x)) + 1.0
        B = A - cp.real(cp.trace(U @ W[k]))
        for l in range(L):
            T = terms.target_forms[l] / s2
            D = cp.real(cp.trace(T @ R_x)) + 1.0
            C = D - cp.real(cp.trace(T @ W[k]))
            B_e, D_e = terms.B_e[k] / s2, terms.D_e[k, l] / s2
            g = (cp.log(A) / LN2 - (math.log2(B_e) + (B - B_e) / (B_e * LN2))
                 + cp.log(C) / LN2 - (math.log2(D_e) + (D - D_e) / (D_e * LN2)))
            constraints.append(config.iota / rho[k] * g >= zeta)

    crb_bound = math.inf
    if math.isfinite(config.xi):
        crb_bound = crb_trace_bound(config) * (1.0 - config.crb_margin)
        _, crb_constraints = crb_epigraph(R_x, n, crb_bound)
        constraints += crb_constraints

    # processing power in mW with f in GHz
    kq = config.kappa * config.Q_l * GHZ ** 3
    constraints += [
        t >= kq * cp.power(f, 3),
        cp.real(cp.trace(R_x)) + fixed_power + cp.sum(t) <= config.P_t,
        f >= f_floor / GHZ,
        cp.sum(f) <= config.F_max / GHZ,
    ]
    problem = cp.Problem(cp.Maximize(zeta), constraints)
    return ConvexProgram(problem, W, R, f, zeta, terms, config, rho, crb_bound, fixed_power)


def _solver_options(name: str, tol: float) -> dict:
    if name == "CLARABEL":
        return {"tol_gap_abs": tol, "tol_gap_rel": tol, "tol_feas": tol, "max_iter": 500}
    if name == "SCS":
        return {"eps_abs": tol, "eps_rel": tol, "max_iters": 100000}
    return {}


def solve_program(problem: cp.Problem, solver: str = SOLVER_CHAIN[0], tol: float = 1e-7) -> str:
    """Solve with the preferred solver, falling back along the chain; returns the status.

    An inaccurate solution moves on to the next solver. It is kept only when nothing
    later in the chain reaches full accuracy, in which case the solver that produced it
    is run again so the variable values are its own.
    """
    chain = [solver] + [s for s in SOLVER_CHAIN if s != solver]
    installed = set(cp.installed_solvers())
    last_status, last_name, inaccurate = None, None, None
    for name in chain:
        if name not in installed:
            logger.warning(f"Solver {name} is not installed, skipping")
            continue
        try:
            problem.solve(solver=name, **_solver_options(name, tol))
        except cp.error.SolverError as e:
            logger.warning(f"Solver {name} failed: {e}")
            continue
        last_status, last_name = problem.status, name
        if last_status == cp.OPTIMAL:
            return last_status
        if last_status == cp.OPTIMAL_INACCURATE:
            logger.warning(f"Solver {name} returned an inaccurate solution")
            inaccurate = inaccurate or name
            continue
        if inaccurate is None and last_status in INFEASIBLE_STATUSES:
            raise SolverError(f"problem is {last_status} (solver {name})", last_status)
        logger.warning(f"Solver {name} ended with status {last_status}")

    if inaccurate is not None:
        if not (last_name == inaccurate and last_status == cp.OPTIMAL_INACCURATE):
            problem.solve(solver=inaccurate, **_solver_options(inaccurate, tol))
        logger.warning(f"Keeping the inaccurate solution from {inaccurate}")
        return problem.status
    raise SolverError(f"no solver produced a solution (last status {last_status})", last_status)


def duality_gap(problem: cp.Problem) -> float:
    """Relative gap between the primal and dual objectives the solver reports; nan if unknown."""
    stats = problem.solver_stats
    extra = getattr(stats, "extra_stats", None) if stats is not None else None
    if isinstance(extra, dict):
        info = extra.get("info", extra)
        primal, dual = info.get("pobj"), info.get("dobj")
    else:
        primal, dual = getattr(extra, "obj_val", None), getattr(extra, "obj_val_dual", None)
    if primal is None or dual is None:
        return math.nan
    primal, dual = float(primal), float(dual)
    if not (math.isfinite(primal) and math.isfinite(dual)):
        return math.nan
    return abs(primal - dual) / max(1.0, abs(primal), abs(dual))


def primal_violation(problem: cp.Problem) -> float:
    """Largest constraint violation relative to the magnitude of the constrained expressions."""
    worst = 0.0
    for constraint in problem.constraints:
        violation = constraint.violation()
        if violation is None:
            continue
        sizes = [float(np.max(np.abs(arg.value))) for arg in constraint.args if arg.value is not None]
        worst = max(worst, float(np.max(np.atleast_1d(violation))) / (1.0 + max(sizes, default=0.0)))
    return worst


def kkt_residual(problem: cp.Problem) -> float:
    """max(relative primal violation, relative duality gap) of the last solve."""
    gap = duality_gap(problem)
    violation = primal_violation(problem)
    return violation if math.isnan(gap) else max(violation, gap)


def solve_convex(program: ConvexProgram, kkt_tol: Optional[float] = None) -> BeamformingSolution:
    """Solve the assembled program and return a cleaned-up relaxed solution.

    zeta is the worst scaled minorant at the solution and `objective` the exact worst
    margin there; zeta <= objective.
    """
    cfg = program.config
    tol = cfg.kkt_tol if kkt_tol is None else kkt_tol
    status = solve_program(program.problem, cfg.solver, SOLVER_TOL_FACTOR * tol)
    residual = kkt_residual(program.problem)
    converged = status == cp.OPTIMAL and residual <= tol
    if not converged:
        logger.warning(f"Sub-problem residual {residual:.2e} (status {status}) exceeds kkt_tol {tol:.1e}")

    W = np.array([project_psd(np.asarray(Wk.value)) for Wk in program.W])
    R = project_psd(np.asarray(program.R.value))
    R_x = R + W.sum(axis=0)
    # processing power only grows with f, so the latency floor is optimal
    f = np.full(program.terms.L, cfg.f_min)
    zeta = float(np.min(cfg.iota / program.rho[:, None] * program.terms.minorant(W, R_x)))
    exact = float(np.min(cfg.iota / program.rho[:, None] * program.terms.exact(W, R_x)))

    active = ["latency"]
    if math.isfinite(program.crb_bound):
        crb = crb_extended(R_x, cfg.sigma_r2, cfg.F, cfg.n_rx, cfg.n_rz)
        # the program enforces the CRB limit backed off by crb_margin
        crb_limit = cfg.xi * program.crb_bound / crb_trace_bound(cfg)
        if crb >= crb_limit * (1.0 - ACTIVE_RTOL):
            active.append("crb")
    total_power = cs_power(R_x) + program.fixed_power + float(np.sum(process_power(f, cfg.Q_l, cfg.kappa)))
    if total_power >= cfg.P_t * (1.0 - ACTIVE_RTOL):
        active.append("power")
    if np.sum(f) >= cfg.F_max * (1.0 - ACTIVE_RTOL):
        active.append("cpu_budget")

    logger.debug(f"Sub-problem solved: status={status}, zeta={zeta:.6f}, residual={residual:.2e}")
    return BeamformingSolution(W, R_x, R, f, zeta, exact, residual, converged, status, tuple(active))


def initial_point(channels: ChannelSet, config: SystemConfig, rho) -> BeamformingSolution:
    """Strictly interior start: R_x = (P0/n) I, W_k = (P0 / (2 K n)) I, f at the latency floor."""
    rho = np.asarray(rho, float)
    K, L, n = channels.K, channels.L, channels.n_t
    f = np.full(L, config.f_min)
    budget = config.P_t - compute_power(rho, config.nu) - float(np.sum(process_power(f, config.Q_l, config.kappa)))
    if budget <= 0:
        raise SolverError(f"no power left for transmission (budget {budget:.3e} mW)", "infeasible")
    for share in (0.5, 0.99):
        P0 = share * budget
        R_x = (P0 / n) * np.eye(n)
        if not math.isfinite(config.xi) or crb_extended(R_x, config.sigma_r2, config.F, config.n_rx, config.n_rz) <= config.xi:
            break
    else:
        raise SolverError("CRB limit unreachable from an isotropic start", "infeasible")
    W = np.array([(P0 / (2 * K * n)) * np.eye(n, dtype=complex) for _ in range(K)])
    R_x = R_x.astype(complex)
    R = R_x - W.sum(axis=0)
    value = margin_objective(channels, W, R_x, rho, config)
    return BeamformingSolution(W, R_x, R, f, value, value)


def sca_iterate(initial: BeamformingSolution, channels: ChannelSet, rho, config: SystemConfig,
                max_epochs: Optional[int] = None, sca_tol: Optional[float] = None
                ) -> Tuple[BeamformingSolution, List[float]]:
    """Re-linearise and solve until the objective gain drops below sca_tol.

    Returns the final solution and the per-epoch zeta trace.
    """
    rho = np.asarray(rho, float)
    max_epochs = config.max_sca_epochs if max_epochs is None else max_epochs
    sca_tol = config.sca_tol if sca_tol is None else sca_tol
    current = initial
    value = margin_objective(channels, initial.W, initial.R_x, rho, config)
    trace: List[float] = []
    for epoch in range(1, max_epochs + 1):
        terms = linearize(channels, current.W, current.R_x, config.sigma_c2)
        program = assemble_subproblem(terms, config, rho, channels)
        candidate = solve_convex(program)
        trace.append(candidate.zeta)
        if candidate.objective < value - max(config.kkt_tol, 1e-9 * abs(value)):
            logger.warning(f"SCA epoch {epoch} lowered the objective ({value:.6f} -> {candidate.objective:.6f}); keeping previous iterate")
            break
        gain = candidate.objective - value
        current, value = candidate, candidate.objective
        logger.debug(f"SCA epoch {epoch}: objective={value:.6f} gain={gain:.2e}")
        if gain < sca_tol:
            break
    return current, trace


def gaussian_randomize(solution: BeamformingSolution, channels: ChannelSet, rho, config: SystemConfig,
                       n_samples: Optional[int] = None, seed: int = 0) -> RandomizationResult:
    """Best rank-one beamformers drawn from CN(0, W_k), rescaled to keep R_x - sum w w^H PSD.

    R_x is held at the relaxed solution, so CRB and power constraints are untouched. The
    principal-eigenvector candidate is always evaluated first. The relaxed bound is the
    exact worst margin of `solution` (not its zeta); a recovered value above it by more
    than RECOVERY_RTOL means the relaxed point was not optimal and is logged.
    """
    n_samples = config.randomization_samples if n_samples is None else n_samples
    rho = np.asarray(rho, float)
    R_x = solution.R_x
    K, n = solution.W.shape[0], solution.W.shape[1]
    roots, principal = [], []
    for Wk in solution.W:
        eigvals, vecs = linalg.eigh(Wk)
        eigvals = np.clip(eigvals, 0.0, None)
        roots.append(vecs * np.sqrt(eigvals))
        principal.append(np.sqrt(eigvals[-1]) * vecs[:, -1])
    powers = np.array([np.real(np.trace(Wk)) for Wk in solution.W])

    def restore(w: np.ndarray) -> Optional[np.ndarray]:
        S = w @ w.conj().T
        try:
            lam = float(linalg.eigh(S, R_x, eigvals_only=True).max())
        except linalg.LinAlgError:
            return None
        if lam > 1.0 + 1e-10:
            w = w / math.sqrt(lam)
        return w

    def score(w: np.ndarray) -> float:
        value = margin_objective(channels, w, R_x, rho, config)
        return value if math.isfinite(value) else -math.inf

    best_w, best_value = None, -math.inf
    candidate = restore(np.column_stack(principal))
    if candidate is not None:
        best_w, best_value = candidate, score(candidate)

    rng = np.random.default_rng(seed)
    for _ in range(n_samples):
        z = (rng.standard_normal((n, K)) + 1j * rng.standard_normal((n, K))) / math.sqrt(2.0)
        w = np.column_stack([roots[k] @ z[:, k] for k in range(K)])
        norms = np.linalg.norm(w, axis=0)
        w = w * np.where(norms > 0, np.sqrt(powers) / np.where(norms > 0, norms, 1.0), 0.0)
        candidate = restore(w)
        if candidate is None:
            continue
        value = score(candidate)
        if value > best_value:
            best_w, best_value = candidate, value

    if best_w is None:
        logger.warning("Gaussian randomisation found no feasible candidate; keeping the relaxed solution")
        return RandomizationResult(np.zeros((n, K), complex), solution.R, -math.inf, False, n_samples,
                                   solution.objective)
    if best_value > solution.objective + RECOVERY_RTOL * max(1.0, abs(solution.objective)):
        logger.warning(f"Rank-one value {best_value:.6f} exceeds the relaxed bound {solution.objective:.6f}")
    R = R_x - best_w @ best_w.conj().T
    return RandomizationResult(best_w, R, best_value, True, n_samples, solution.objective)


def attach_rank_one(solution: BeamformingSolution, result: RandomizationResult) -> BeamformingSolution:
    if not result.success:
        return solution
    return replace(solution, w=result.w, recovered_objective=result.objective)
