"""
Array geometry, unit helpers and seeded placement of users and target scatterers.

Antennas live in the y = 0 plane: a 2-D coordinate (x, z) is the 3-D point (x, 0, z).
Entities are described by (theta, phi, d): azimuth, broadside angle and range from the
origin, i.e. the point d * (cos(theta) sin(phi), sin(theta) sin(phi), cos(phi)).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from config import SystemConfig, dbm_to_linear, validate_config

logger = logging.getLogger(__name__)

__all__ = [
    "dbm_to_linear", "rayleigh_distance", "TxArray", "RxArray", "Placement", "Scenario",
    "build_arrays", "generate_placements", "build_scenario", "sample_positions",
    "spherical_to_cartesian", "cartesian_to_spherical",
]

# angular windows for placements (rad)
USER_ANGLE_WINDOW = (np.pi / 6, 5 * np.pi / 6)
TARGET_ANGLE_WINDOW = (np.pi / 4, 3 * np.pi / 4)


def rayleigh_distance(aperture: float, wavelength: float) -> float:
    """Near-field limit 2 D^2 / lambda."""
    if aperture < 0 or wavelength <= 0:
        raise ValueError(f"need aperture >= 0 and wavelength > 0, got {aperture}, {wavelength}")
    return 2.0 * aperture ** 2 / wavelength


def spherical_to_cartesian(theta, phi, d) -> np.ndarray:
    theta, phi, d = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float), np.asarray(d, float))
    return np.stack([d * np.cos(theta) * np.sin(phi),
                     d * np.sin(theta) * np.sin(phi),
                     d * np.cos(phi)], axis=-1)


def cartesian_to_spherical(points) -> np.ndarray:
    """Inverse of spherical_to_cartesian for points with y >= 0; rows are (theta, phi, d)."""
    points = np.asarray(points, float)
    d = np.linalg.norm(points, axis=-1)
    phi = np.arccos(np.clip(points[..., 2] / d, -1.0, 1.0))
    theta = np.arctan2(points[..., 1], points[..., 0])
    return np.stack([theta, phi, d], axis=-1)


def _readonly(arr) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TxArray:
    """Fluid-antenna transmitter.

    `nominal` holds the grid points, `positions` the current (x, z) of each antenna and
    `lower`/`upper` the per-antenna box corners. Index 0 is the fixed centroid.
    """
    nominal: np.ndarray
    positions: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    wavelength: float

    def __post_init__(self):
        for name in ("nominal", "positions", "lower", "upper"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        if self.positions.shape != self.nominal.shape or self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError(f"positions must have shape (N, 2), got {self.positions.shape}")
        if np.any(self.lower > self.upper):
            raise ValueError("box lower corner exceeds upper corner")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.positions[:, 0]

    @property
    def z(self) -> np.ndarray:
        return self.positions[:, 1]

    @property
    def u(self) -> np.ndarray:
        """Flattened layout [x_0..x_{N-1}, z_0..z_{N-1}]."""
        return np.concatenate([self.positions[:, 0], self.positions[:, 1]])

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Flattened box bounds with the centroid pinned to its nominal point."""
        lower = np.concatenate([self.lower[:, 0], self.lower[:, 1]])
        upper = np.concatenate([self.upper[:, 0], self.upper[:, 1]])
        lower[[0, self.n]] = self.nominal[0]
        upper[[0, self.n]] = self.nominal[0]
        return lower, upper

    def fixed_mask(self) -> np.ndarray:
        """True for coordinates that cannot move (centroid and zero-width boxes)."""
        lower, upper = self.bounds()
        return upper - lower <= 0

    def with_positions(self, u) -> "TxArray":
        u = np.asarray(u, float)
        if u.shape != (2 * self.n,):
            raise ValueError(f"u must have length {2 * self.n}, got {u.shape}")
        return TxArray(self.nominal, np.column_stack([u[:self.n], u[self.n:]]),
                       self.lower, self.upper, self.wavelength)

    def contains(self, u, tol: float = 1e-12) -> bool:
        lower, upper = self.bounds()
        u = np.asarray(u, float)
        return bool(np.all(u >= lower - tol) and np.all(u <= upper + tol))


@dataclass(frozen=True)
class RxArray:
    """Fixed receive grid; positions are (m_x d_x, m_z d_z) with indices from 0."""
    positions: np.ndarray
    d_x: float
    d_z: float
    wavelength: float

    def __post_init__(self):
        object.__setattr__(self, "positions", _readonly(self.positions))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.positions[:, 0]

    @property
    def z(self) -> np.ndarray:
        return self.positions[:, 1]


@dataclass(frozen=True)
class Placement:
    """Users and target scatterers as (theta, phi, d) rows."""
    users: np.ndarray           # (K, 3)
    scatterers: np.ndarray      # (L, N_s, 3)
    target_centers: np.ndarray  # (L, 3) cartesian
    cluster_radius: float

    def __post_init__(self):
        for name in ("users", "scatterers", "target_centers"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))

    @property
    def K(self) -> int:
        return self.users.shape[0]

    @property
    def L(self) -> int:
        return self.scatterers.shape[0]

    def user_points(self) -> np.ndarray:
        return spherical_to_cartesian(self.users[:, 0], self.users[:, 1], self.users[:, 2])

    def scatterer_points(self) -> np.ndarray:
        s = self.scatterers
        return spherical_to_cartesian(s[..., 0], s[..., 1], s[..., 2])


@dataclass(frozen=True)
class Scenario:
    """Everything the optimisation stages need for one seeded instance."""
    config: SystemConfig
    tx: TxArray
    rx: RxArray
    placement: Placement
    seed: int

    def with_tx(self, tx: TxArray) -> "Scenario":
        return Scenario(self.config, tx, self.rx, self.placement, self.seed)


def _grid_offsets(count: int, pitch: float) -> np.ndarray:
    return (np.arange(count) - (count - 1) / 2.0) * pitch


def build_arrays(config: SystemConfig) -> Tuple[TxArray, RxArray]:
    """Tx grid centred at the origin with one box per antenna, Rx grid with spacing d_x = d_z."""
    pitch = config.tx_grid_pitch
    side = config.movable_range
    xs = _grid_offsets(config.n_tx, pitch)
    zs = _grid_offsets(config.n_tz, pitch)
    grid = np.array([(x, z) for z in zs for x in xs])

    # centroid first: the element nearest the origin, ties broken by grid order
    order = np.argsort(np.hypot(grid[:, 0], grid[:, 1]), kind="stable")
    first = order[0]
    grid = np.vstack([grid[first], np.delete(grid, first, axis=0)])
    tx = TxArray(grid, grid, grid - side / 2, grid + side / 2, config.wavelength)

    spacing = config.rx_pitch
    rx_grid = np.array([(mx * spacing, mz * spacing)
                        for mz in range(config.n_rz) for mx in range(config.n_rx)])
    rx = RxArray(rx_grid, spacing, spacing, config.wavelength)
    logger.debug(f"Built arrays: {tx.n} Tx (pitch {pitch:.4g} m, box {side:.4g} m), {rx.n} Rx (pitch {spacing:.4g} m)")
    return tx, rx


def _uniform_ball(rng: np.random.Generator, count: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal((count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, count) ** (1.0 / 3.0)
    return direction * r[:, None]


def generate_placements(config: SystemConfig, seed: int) -> Placement:
    """Seeded near-field placement of K users and L clusters of N_s scatterers."""
    rng = np.random.default_rng(seed)
    lo, hi = USER_ANGLE_WINDOW
    users = np.column_stack([
        rng.uniform(lo, hi, config.K),
        rng.uniform(lo, hi, config.K),
        rng.uniform(config.range_min, config.range_max, config.K),
    ])

    lo, hi = TARGET_ANGLE_WINDOW
    centers = spherical_to_cartesian(
        rng.uniform(lo, hi, config.L),
        rng.uniform(lo, hi, config.L),
        rng.uniform(config.range_min, config.range_max, config.L),
    )
    scatterers = np.empty((config.L, config.N_s, 3))
    for l in range(config.L):
        points = centers[l] + _uniform_ball(rng, config.N_s, config.cluster_radius)
        scatterers[l] = cartesian_to_spherical(points)
    return Placement(users, scatterers, centers, config.cluster_radius)


def build_scenario(config: SystemConfig, seed: Optional[int] = None) -> Scenario:
    """Validate the config and build arrays plus placements for one seed."""
    validate_config(config)
    seed = config.rng_seed if seed is None else seed
    tx, rx = build_arrays(config)
    placement = generate_placements(config, seed)
    return Scenario(config, tx, rx, placement, seed)


def sample_positions(tx: TxArray, rng: np.random.Generator) -> np.ndarray:
    """Uniform positions inside every box; the centroid stays put."""
    lower, upper = tx.bounds()
    return lower + (upper - lower) * rng.uniform(0.0, 1.0, lower.shape)
