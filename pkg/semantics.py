"""
Communication and computing metrics: SINRs, semantic rates, secrecy, efficiency and power models.

Beamformers are accepted either as an (n_t, K) matrix whose columns are w_k or as a
(K, n_t, n_t) stack of relaxed PSD matrices W_k.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from config import ConfigError, SystemConfig, rho_lower_bound_from

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SemanticState:
    rho: np.ndarray
    rho_lb: float
    iota: float = 1.0

    def __post_init__(self):
        rho = np.asarray(self.rho, float)
        if not 0 < self.rho_lb <= 1:
            raise ValueError(f"rho_LB must lie in (0, 1], got {self.rho_lb}")
        if np.any(rho < self.rho_lb - 1e-12) or np.any(rho > 1.0):
            raise ValueError(f"rho must lie in [{self.rho_lb:.4f}, 1], got {rho}")
        object.__setattr__(self, "rho", rho)


@dataclass(frozen=True)
class MetricsReport:
    gamma: np.ndarray          # (K,)
    Gamma: np.ndarray          # (L, K) SINR of target l on user k's stream
    rate_user: np.ndarray      # (K,)
    rate_target: np.ndarray    # (L, K)
    secrecy: np.ndarray        # (K,) clamped S_k
    margins: np.ndarray        # (K, L) unclamped R_k - R_{l|k}
    efficiency: np.ndarray     # (K,) NaN where R_k = 0
    P_comp: float
    P_cs: float
    P_process: np.ndarray      # (L,)
    latency: np.ndarray        # (L,)

    @property
    def min_secrecy(self) -> float:
        return float(self.secrecy.min())


def beam_gains(h: np.ndarray, beams: np.ndarray) -> np.ndarray:
    """Per-user quadratic forms |h w_k|^2 or h W_k h^H."""
    beams = np.asarray(beams)
    if beams.ndim == 2:
        return np.abs(h @ beams) ** 2
    return np.real(np.einsum("i,kij,j->k", h, beams, h.conj()))


def beam_covariance(beams: np.ndarray) -> np.ndarray:
    """Sum of w_k w_k^H (vector form) or of W_k (matrix form)."""
    beams = np.asarray(beams)
    if beams.ndim == 2:
        return beams @ beams.conj().T
    return beams.sum(axis=0)


def _quad(h: np.ndarray, M: np.ndarray) -> float:
    return float(np.real(h @ M @ h.conj()))


def _sinr(h, beams, R, sigma2, k) -> float:
    gains = beam_gains(h, beams)
    interference = gains.sum() - gains[k] + _quad(h, R) + sigma2
    return float(gains[k] / interference)


def sinr_user(h_k: np.ndarray, beams: np.ndarray, R: np.ndarray, sigma_c2: float, k: int) -> float:
    """gamma_k: user k's stream against other streams, sensing signal and noise."""
    return _sinr(h_k, beams, R, sigma_c2, k)


def sinr_target(h_l: np.ndarray, beams: np.ndarray, R: np.ndarray, sigma_c2: float, k: int) -> float:
    """Gamma_{l|k}: target l overhearing user k's stream."""
    return _sinr(h_l, beams, R, sigma_c2, k)


def _check_rho(rho) -> np.ndarray:
    rho = np.asarray(rho, float)
    if np.any(rho <= 0) or np.any(rho > 1):
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    return rho


def semantic_rate(gamma, rho, iota: float = 1.0):
    """(iota / rho) log2(1 + gamma)."""
    rho = _check_rho(rho)
    result = iota / rho * np.log2(1.0 + np.asarray(gamma, float))
    return float(result) if np.ndim(result) == 0 else result


def rho_lower_bound(varrho: float, weights: Sequence[float], precisions: Sequence[float]) -> float:
    if not 0 < varrho <= 1:
        raise ConfigError(f"varrho must lie in (0, 1], got {varrho}")
    if any(not 0 < p <= 1 for p in precisions):
        raise ConfigError(f"precisions must lie in (0, 1], got {list(precisions)}")
    if len(weights) != len(precisions) or abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError("weights must match precisions and sum to 1")
    value = rho_lower_bound_from(varrho, weights, precisions)
    if not 0 < value <= 1:
        raise ConfigError(f"rho_LB = {value:.4f} lies outside (0, 1]")
    return value


def secrecy_rate(R_k: float, R_targets: Sequence[float]) -> float:
    """max(min_l (R_k - R_{l|k}), 0): the strongest eavesdropper binds."""
    return max(float(R_k) - float(np.max(R_targets)), 0.0)


def info_efficiency(S_k: float, R_k: float) -> Optional[float]:
    if R_k <= 0:
        return None
    return float(np.clip(S_k / R_k, 0.0, 1.0))


def compute_power(rho, nu: float) -> float:
    """-nu sum_k ln rho_k."""
    return float(-nu * np.sum(np.log(_check_rho(rho))))


def cs_power(R_x: np.ndarray) -> float:
    return float(np.real(np.trace(R_x)))


def latency(U_l, Q_l, f_l, f_bar_l):
    f_l = np.asarray(f_l, float)
    if np.any(f_l <= f_bar_l):
        raise ValueError(f"CPU frequency {f_l} must exceed the baseline {f_bar_l}")
    result = U_l * Q_l / (f_l - f_bar_l)
    return float(result) if np.ndim(result) == 0 else result


def process_power(f_l, Q_l, kappa):
    f_l = np.asarray(f_l, float)
    if np.any(f_l < 0):
        raise ValueError(f"CPU frequency must be >= 0, got {f_l}")
    result = kappa * f_l ** 3 * Q_l
    return float(result) if np.ndim(result) == 0 else result


def secrecy_margins(users: np.ndarray, targets: np.ndarray, beams: np.ndarray, R_x: np.ndarray,
                    rho, iota: float, sigma_c2: float) -> np.ndarray:
    """(K, L) unclamped R_k - R_{l|k} for relaxed or rank-one beamformers and total covariance R_x."""
    rho = _check_rho(rho)
    R = R_x - beam_covariance(beams)
    K = users.shape[0]
    margins = np.empty((K, targets.shape[0]))
    for k in range(K):
        gamma = _sinr(users[k], beams, R, sigma_c2, k)
        for l, h_l in enumerate(targets):
            Gamma = _sinr(h_l, beams, R, sigma_c2, k)
            margins[k, l] = iota / rho[k] * (math.log2(1.0 + gamma) - math.log2(1.0 + Gamma))
    return margins


def evaluate_metrics(channels, beams: np.ndarray, R_x: np.ndarray, rho, f, config: SystemConfig) -> MetricsReport:
    """All rate, secrecy, efficiency and power figures for one operating point."""
    rho = _check_rho(rho)
    R = R_x - beam_covariance(beams)
    K, L = channels.K, channels.L
    gamma = np.array([sinr_user(channels.users[k], beams, R, config.sigma_c2, k) for k in range(K)])
    Gamma = np.array([[sinr_target(channels.targets[l], beams, R, config.sigma_c2, k) for k in range(K)]
                      for l in range(L)])
    rate_user = semantic_rate(gamma, rho, config.iota)
    rate_target = semantic_rate(Gamma, rho[None, :], config.iota)
    margins = (rate_user[None, :] - rate_target).T
    secrecy = np.array([secrecy_rate(rate_user[k], rate_target[:, k]) for k in range(K)])
    efficiency = np.full(K, np.nan)
    for k in range(K):
        value = info_efficiency(secrecy[k], rate_user[k])
        if value is not None:
            efficiency[k] = value
    f = np.asarray(f, float)
    return MetricsReport(
        gamma=gamma, Gamma=Gamma, rate_user=rate_user, rate_target=rate_target,
        secrecy=secrecy, margins=margins, efficiency=efficiency,
        P_comp=compute_power(rho, config.nu), P_cs=cs_power(R_x),
        P_process=np.asarray(process_power(f, config.Q_l, config.kappa)),
        latency=np.asarray(latency(config.U_l, config.Q_l, f, config.f_bar_l)),
    )
