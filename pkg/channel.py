"""
Near-field channel synthesis under the non-uniform spherical wave model.

Steering phases use the second-order (Fresnel) expansion in each antenna's own (x, z);
path-loss amplitudes use exact antenna-to-entity distances.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from scenario import Placement, RxArray, TxArray, spherical_to_cartesian

logger = logging.getLogger(__name__)

SQRT_4PI = np.sqrt(4.0 * np.pi)
MIN_DISTANCE = 1e-12


@dataclass(frozen=True)
class ChannelSet:
    users: np.ndarray    # (K, n_t) rows h_k
    targets: np.ndarray  # (L, n_t) rows h_l
    G: np.ndarray        # (n_r, n_t)

    @property
    def K(self) -> int:
        return self.users.shape[0]

    @property
    def L(self) -> int:
        return self.targets.shape[0]

    @property
    def n_t(self) -> int:
        return self.users.shape[1]


def _check_range(d) -> None:
    if np.any(np.asarray(d) <= 0):
        raise ValueError(f"range d must be > 0, got {d}")


def steering_phase(theta, phi, d, x, z, wavelength: float) -> np.ndarray:
    """Phase of each element at coordinates (x, z) for an entity at (theta, phi, d)."""
    _check_range(d)
    k = 2.0 * np.pi / wavelength
    ct = np.cos(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    return k * (x * ct * sp - x ** 2 * (1.0 - ct ** 2 * sp ** 2) / (2.0 * d)
                + z * cp - z ** 2 * sp ** 2 / (2.0 * d))


def steering_phase_derivatives(theta, phi, d, x, z, wavelength: float):
    """d(phase)/d(x), d(phase)/d(z) per element, and d(phase)/d(theta, phi, d) as (3, N)."""
    k = 2.0 * np.pi / wavelength
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    d_x = k * (ct * sp - x * (1.0 - ct ** 2 * sp ** 2) / d)
    d_z = k * (cp - z * sp ** 2 / d)
    d_theta = k * (-x * st * sp - x ** 2 * ct * st * sp ** 2 / d)
    d_phi = k * (x * ct * cp + x ** 2 * ct ** 2 * sp * cp / d - z * sp - z ** 2 * sp * cp / d)
    d_range = k * (x ** 2 * (1.0 - ct ** 2 * sp ** 2) + z ** 2 * sp ** 2) / (2.0 * d ** 2)
    return d_x, d_z, np.vstack([d_theta, d_phi, d_range])


def tx_steering(theta: float, phi: float, d: float, tx: TxArray) -> np.ndarray:
    return np.exp(1j * steering_phase(theta, phi, d, tx.x, tx.z, tx.wavelength))


def rx_steering(theta: float, phi: float, d: float, rx: RxArray) -> np.ndarray:
    return np.exp(1j * steering_phase(theta, phi, d, rx.x, rx.z, rx.wavelength))


def _distances(point, x, z) -> np.ndarray:
    point = np.asarray(point, float)
    dist = np.sqrt((x - point[0]) ** 2 + point[1] ** 2 + (z - point[2]) ** 2)
    if np.any(dist < MIN_DISTANCE):
        raise ValueError(f"entity at {point.tolist()} coincides with an antenna (singular path loss)")
    return dist


def pathloss_user(b, tx: TxArray) -> np.ndarray:
    """Per-element amplitude 1 / sqrt(4 pi ||u_i - b||^2)."""
    return 1.0 / (SQRT_4PI * _distances(b, tx.x, tx.z))


def pathloss_echo(b, tx: TxArray, rx: RxArray) -> np.ndarray:
    """(n_r, n_t) amplitudes 1 / (4 pi ||u_i - b|| ||v_m - b||)."""
    return 1.0 / (4.0 * np.pi * np.outer(_distances(b, rx.x, rx.z), _distances(b, tx.x, tx.z)))


def entity_channel(theta: float, phi: float, d: float, tx: TxArray) -> np.ndarray:
    b = spherical_to_cartesian(theta, phi, d)
    return pathloss_user(b, tx) * tx_steering(theta, phi, d, tx)


def entity_channel_derivatives(theta: float, phi: float, d: float, x: np.ndarray, z: np.ndarray,
                               wavelength: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Channel h and its element-wise derivatives dh_i/dx_i, dh_i/dz_i at antennas (x, z).

    Element i only depends on antenna i, so the Jacobian is diagonal and returned as vectors.
    """
    b = spherical_to_cartesian(theta, phi, d)
    dist = _distances(b, x, z)
    phase = steering_phase(theta, phi, d, x, z, wavelength)
    h = np.exp(1j * phase) / (SQRT_4PI * dist)
    p_x, p_z, _ = steering_phase_derivatives(theta, phi, d, x, z, wavelength)
    dh_x = h * (-(x - b[0]) / dist ** 2 + 1j * p_x)
    dh_z = h * (-(z - b[2]) / dist ** 2 + 1j * p_z)
    return h, dh_x, dh_z


def user_channel(placement: Placement, tx: TxArray) -> np.ndarray:
    """Rows h_k = Phi_k (Hadamard) a_t for every user."""
    return np.array([entity_channel(*row, tx) for row in placement.users])


def target_channel(placement: Placement, tx: TxArray) -> np.ndarray:
    """Rows h_l = sum over the target's scatterers of Phi (Hadamard) a_t."""
    return np.array([sum(entity_channel(*row, tx) for row in cluster)
                     for cluster in placement.scatterers])


def echo_channel(placement: Placement, tx: TxArray, rx: RxArray,
                 targets: Optional[Sequence[int]] = None) -> np.ndarray:
    """G = sum_l sum_s Psi_{l,s} (Hadamard) (a_r^H a_t)."""
    indices = range(placement.L) if targets is None else targets
    G = np.zeros((rx.n, tx.n), dtype=complex)
    for l in indices:
        for theta, phi, d in placement.scatterers[l]:
            b = spherical_to_cartesian(theta, phi, d)
            a_t = tx_steering(theta, phi, d, tx)
            a_r = rx_steering(theta, phi, d, rx)
            G += pathloss_echo(b, tx, rx) * np.outer(a_r.conj(), a_t)
    return G


def build_channels(placement: Placement, tx: TxArray, rx: RxArray) -> ChannelSet:
    channels = ChannelSet(user_channel(placement, tx), target_channel(placement, tx),
                          echo_channel(placement, tx, rx))
    if not (np.all(np.isfinite(channels.users)) and np.all(np.isfinite(channels.targets))
            and np.all(np.isfinite(channels.G))):
        raise ValueError("non-finite channel entries")
    return channels
