"""
Fisher information, Cramer-Rao bounds and the least-squares estimation oracle.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg

from channel import steering_phase, steering_phase_derivatives
from scenario import RxArray, TxArray, spherical_to_cartesian

logger = logging.getLogger(__name__)

PSD_TOL = 1e-10
SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class SensingReport:
    fim: np.ndarray
    crb_scalar: float
    point_fim: Optional[np.ndarray] = None


@dataclass(frozen=True)
class MseReport:
    mse: float
    crb: float
    ratio: float
    trials: int


def _hermitian_eigvals(R: np.ndarray, name: str = "R_x") -> np.ndarray:
    R = np.asarray(R)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"{name} must be square, got shape {R.shape}")
    scale = max(1.0, float(np.max(np.abs(R)))) if R.size else 1.0
    if not np.allclose(R, R.conj().T, atol=PSD_TOL * scale):
        raise ValueError(f"{name} is not Hermitian")
    eigvals = linalg.eigvalsh(R)
    if eigvals.size and eigvals.min() < -PSD_TOL * scale:
        raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {eigvals.min():.3e})")
    return eigvals


def psd_sqrt(R: np.ndarray) -> np.ndarray:
    """Hermitian square root of a PSD matrix via its eigen-decomposition."""
    eigvals, vecs = linalg.eigh(R)
    return (vecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ vecs.conj().T


def fim_extended(R_x: np.ndarray, sigma_r2: float, F: int, n_r: int) -> np.ndarray:
    """(F / sigma_r^2) R_x^T kron I_{n_r}."""
    _hermitian_eigvals(R_x)
    return (F / sigma_r2) * np.kron(np.asarray(R_x).T, np.eye(n_r))


def crb_extended(R_x: np.ndarray, sigma_r2: float, F: int, n_rx: int, n_rz: int) -> float:
    """sigma_r^2 n_rx n_rz / F * Tr(R_x^-1)."""
    eigvals = _hermitian_eigvals(R_x)
    if eigvals.size == 0 or eigvals.min() <= SINGULAR_TOL * max(1.0, eigvals.max()):
        raise ValueError("R_x is singular; the extended-target FIM loses rank")
    return float(sigma_r2 * n_rx * n_rz / F * np.sum(1.0 / eigvals))


def point_target_response(theta, phi, d, tx: TxArray, rx: RxArray,
                          include_pathloss: bool = False) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Echo response G (n_r x n_t) of a single point target and [dG/dtheta, dG/dphi, dG/dd]."""
    if d <= 0:
        raise ValueError(f"range d must be > 0, got {d}")
    phase_t = steering_phase(theta, phi, d, tx.x, tx.z, tx.wavelength)
    phase_r = steering_phase(theta, phi, d, rx.x, rx.z, rx.wavelength)
    _, _, dpsi_t = steering_phase_derivatives(theta, phi, d, tx.x, tx.z, tx.wavelength)
    _, _, dpsi_r = steering_phase_derivatives(theta, phi, d, rx.x, rx.z, rx.wavelength)
    E = np.exp(1j * (phase_t[None, :] - phase_r[:, None]))
    dE = [E * 1j * (dpsi_t[p][None, :] - dpsi_r[p][:, None]) for p in range(3)]
    if not include_pathloss:
        return E, dE

    b = spherical_to_cartesian(theta, phi, d)
    tx_pts = np.column_stack([tx.x, np.zeros(tx.n), tx.z])
    rx_pts = np.column_stack([rx.x, np.zeros(rx.n), rx.z])
    r_t = np.linalg.norm(b - tx_pts, axis=1)
    r_r = np.linalg.norm(b - rx_pts, axis=1)
    psi = 1.0 / (4.0 * np.pi * np.outer(r_r, r_t))
    ct, st, cp, sp = np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)
    db = np.array([
        d * np.array([-st * sp, ct * sp, 0.0]),
        d * np.array([ct * cp, st * cp, -sp]),
        np.array([ct * sp, st * sp, cp]),
    ])
    grad_t = (b - tx_pts) / r_t[:, None] ** 2
    grad_r = (b - rx_pts) / r_r[:, None] ** 2
    G = psi * E
    dG = []
    for p in range(3):
        dpsi = -psi * ((grad_t @ db[p])[None, :] + (grad_r @ db[p])[:, None])
        dG.append(dpsi * E + psi * dE[p])
    return G, dG


def point_target_fim(theta, phi, d, R_x, tx: TxArray, rx: RxArray, sigma_r2: float, F: int,
                     include_pathloss: bool = False) -> np.ndarray:
    """3x3 FIM over (theta, phi, d) for a single point target.

    J_pq = (2F / sigma_r^2) Re Tr(dG/dp R_x dG/dq^H).
    """
    _, dG = point_target_response(theta, phi, d, tx, rx, include_pathloss)
    R_x = np.asarray(R_x)
    J = np.empty((3, 3))
    for p in range(3):
        left = dG[p] @ R_x
        for q in range(p, 3):
            J[p, q] = J[q, p] = (2.0 * F / sigma_r2) * np.real(np.trace(left @ dG[q].conj().T))
    return J


def ls_estimate(Z: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Least-squares (maximum-likelihood) echo estimate Z X^H (X X^H)^-1."""
    n_t, frames = X.shape
    if frames < n_t:
        raise ValueError(f"need at least {n_t} frames, got {frames}")
    gram = X @ X.conj().T
    if np.linalg.matrix_rank(gram) < n_t:
        raise ValueError("transmit matrix is rank deficient")
    return linalg.solve(gram, X @ Z.conj().T, assume_a="her").conj().T


def synthesize_transmit(R_x: np.ndarray, F: int, mode: str = "exact", seed: int = 0) -> np.ndarray:
    """Transmit block X (n_t x F) with sample covariance R_x.

    exact: X = sqrt(F) R_x^{1/2} Q^H with Q semi-unitary, so X X^H = F R_x.
    stochastic: Gaussian columns with covariance R_x.
    """
    _hermitian_eigvals(R_x)
    n = R_x.shape[0]
    rng = np.random.default_rng(seed)
    root = psd_sqrt(R_x)
    if mode == "exact":
        if F < n:
            raise ValueError(f"exact synthesis needs F >= n_t, got F={F}, n_t={n}")
        A = rng.standard_normal((F, n)) + 1j * rng.standard_normal((F, n))
        Q, _ = linalg.qr(A, mode="economic")
        return np.sqrt(F) * root @ Q.conj().T
    if mode == "stochastic":
        S = (rng.standard_normal((n, F)) + 1j * rng.standard_normal((n, F))) / np.sqrt(2.0)
        return root @ S
    raise ValueError(f"unknown synthesis mode: {mode}")


def monte_carlo_mse(G: np.ndarray, R_x: np.ndarray, sigma_r2: float, F: int, trials: int,
                    seed: int, mode: str = "stochastic") -> MseReport:
    """Mean ||G_hat - G||_F^2 of the LS estimator over independent blocks and noise."""
    n_r = G.shape[0]
    crb = crb_extended(R_x, sigma_r2, F, n_r, 1)
    children = np.random.SeedSequence(seed).spawn(trials)
    errors = np.empty(trials)
    for i, child in enumerate(children):
        x_seed, n_seed = child.generate_state(2)
        X = synthesize_transmit(R_x, F, mode, int(x_seed))
        rng = np.random.default_rng(int(n_seed))
        N = np.sqrt(sigma_r2 / 2.0) * (rng.standard_normal((n_r, F)) + 1j * rng.standard_normal((n_r, F)))
        G_hat = ls_estimate(G @ X + N, X)
        errors[i] = np.linalg.norm(G_hat - G) ** 2
    mse = float(errors.mean())
    logger.debug(f"Monte Carlo MSE over {trials} trials: {mse:.4e} (CRB {crb:.4e})")
    return MseReport(mse, crb, mse / crb, trials)


def sensing_report(R_x: np.ndarray, sigma_r2: float, F: int, n_rx: int, n_rz: int,
                   point_target=None, tx: Optional[TxArray] = None, rx: Optional[RxArray] = None) -> SensingReport:
    point_fim = None
    if point_target is not None:
        point_fim = point_target_fim(*point_target, R_x, tx, rx, sigma_r2, F)
    return SensingReport(fim_extended(R_x, sigma_r2, F, n_rx * n_rz),
                         crb_extended(R_x, sigma_r2, F, n_rx, n_rz), point_fim)
