"""
Shared configuration and constants for the NF-ISCSC design tools.
"""

import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple, TypedDict

# Constants
SPEED_OF_LIGHT = 3.0e8  # m/s
RESULTS_DIR = "results"
REPORT_TEMPLATE = "templates/report.md.j2"

# Radio / array defaults
CARRIER_FREQUENCY = 50e9
N_TX = 3
N_TZ = 3
N_RX = 5
N_RZ = 5
FRAMES = 100
MOVABLE_AREA = 0.0025  # m^2 per FA

# Scenario defaults
NUM_USERS = 5
NUM_TARGETS = 2
NUM_SCATTERERS = 6

# Power / noise (dBm at the config boundary, linear mW everywhere else)
P_T_DBM = 25.0
SIGMA_C2_DBM = -30.0
SIGMA_R2_DBM = -40.0
CRB_LIMIT = 0.5

# Computing
T_MAX = 0.02
DATA_BITS = 0.5e6
CYCLES_PER_BIT = 110.0
# 1e-28 with the extra Q_l factor exceeds P_t for two targets
KAPPA = 1e-31
NU = 20.0  # mW per nat
IOTA = 1.0
F_MAX = 10e9
F_BAR = 0.0

# Semantic extraction (rho lower bound inputs)
VARRHO = 0.2
SEMANTIC_WEIGHTS = (0.25, 0.25, 0.25, 0.25)
SEMANTIC_PRECISIONS = (0.9, 0.9, 0.9, 0.9)

# Placement window
NF_APERTURE = 0.5
RANGE_MIN = 3.0
RANGE_MAX = 20.0
CLUSTER_RADIUS = 0.5

SOLVER_CHAIN = ("CLARABEL", "SCS")
DBM_SUFFIX = "_dbm"


class ConfigError(ValueError):
    """Raised when a configuration value breaks a system invariant."""


def dbm_to_linear(p_dbm: float) -> float:
    """Convert dBm to linear milliwatts."""
    if not math.isfinite(p_dbm):
        raise ValueError(f"power must be finite, got {p_dbm}")
    return 10.0 ** (p_dbm / 10.0)


def rho_lower_bound_from(varrho: float, weights, precisions) -> float:
    """1 / (1 - ln varrho + sum_g w_g ln p_g), natural log throughout."""
    weighted = sum(w * math.log(p) for w, p in zip(weights, precisions))
    denominator = 1.0 - math.log(varrho) + weighted
    if denominator <= 0:
        return math.inf
    return 1.0 / denominator


@dataclass(frozen=True)
class SystemConfig:
    carrier_frequency: float = CARRIER_FREQUENCY
    n_tx: int = N_TX
    n_tz: int = N_TZ
    n_rx: int = N_RX
    n_rz: int = N_RZ
    F: int = FRAMES
    C_i: float = MOVABLE_AREA
    K: int = NUM_USERS
    L: int = NUM_TARGETS
    N_s: int = NUM_SCATTERERS
    sigma_c2: float = dbm_to_linear(SIGMA_C2_DBM)
    sigma_r2: float = dbm_to_linear(SIGMA_R2_DBM)
    P_t: float = dbm_to_linear(P_T_DBM)
    xi: float = CRB_LIMIT
    T_max: float = T_MAX
    U_l: float = DATA_BITS
    Q_l: float = CYCLES_PER_BIT
    kappa: float = KAPPA
    nu: float = NU
    iota: float = IOTA
    F_max: float = F_MAX
    f_bar_l: float = F_BAR
    varrho: float = VARRHO
    semantic_weights: Tuple[float, ...] = SEMANTIC_WEIGHTS
    semantic_precisions: Tuple[float, ...] = SEMANTIC_PRECISIONS
    tx_pitch: Optional[float] = None
    rx_spacing: Optional[float] = None
    nf_aperture: float = NF_APERTURE
    range_min: float = RANGE_MIN
    range_max: float = RANGE_MAX
    cluster_radius: float = CLUSTER_RADIUS
    # tolerances and iteration budgets
    sca_tol: float = 1e-4
    kkt_tol: float = 1e-6
    bisection_tol: float = 1e-8
    ao_tol: float = 1e-3
    grad_fd_step: float = 1e-6
    tau_init: float = 1.0
    tau_min: float = 1e-8
    armijo_c: float = 1e-4
    shrink_factor: float = 0.5
    curvature_eps: float = 1e-12
    bfgs_tol: float = 1e-6
    softmin_beta: float = 50.0
    bfgs_initial_step: float = 0.1   # first BFGS step length, wavelengths
    max_sca_epochs: int = 10
    max_bfgs_epochs: int = 50
    max_ao_epochs: int = 30
    randomization_samples: int = 200
    crb_margin: float = 1e-6
    solver: str = SOLVER_CHAIN[0]
    rng_seed: int = 0

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def n_t(self) -> int:
        return self.n_tx * self.n_tz

    @property
    def n_r(self) -> int:
        return self.n_rx * self.n_rz

    @property
    def movable_range(self) -> float:
        """Side of each square FA box, sqrt(C_i)."""
        return math.sqrt(self.C_i)

    @property
    def rho_lb(self) -> float:
        return rho_lower_bound_from(self.varrho, self.semantic_weights, self.semantic_precisions)

    @property
    def tx_grid_pitch(self) -> float:
        """Nominal Tx grid pitch; defaults to the box side so boxes tile."""
        return self.tx_pitch if self.tx_pitch is not None else self.movable_range

    @property
    def rx_pitch(self) -> float:
        return self.rx_spacing if self.rx_spacing is not None else self.wavelength / 2

    @property
    def f_min(self) -> float:
        """Latency floor on each target's CPU frequency."""
        return self.f_bar_l + self.U_l * self.Q_l / self.T_max

    def with_overrides(self, **kwargs) -> "SystemConfig":
        """Return a validated copy with the given fields replaced."""
        updated = replace(self, **kwargs)
        validate_config(updated)
        return updated


# Record types exchanged with the experiment runner
class ResultRow(TypedDict):
    experiment: str
    seed: int
    sweep_value: float
    metric: str
    value: float
    wall_time: float
    status: str


RESULT_FIELDS = list(ResultRow.__annotations__)


def validate_config(cfg: SystemConfig) -> None:
    """Check every SystemConfig invariant, raising ConfigError naming the field."""
    for name in ("n_tx", "n_tz", "n_rx", "n_rz", "F", "K", "L", "N_s"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be a positive count, got {getattr(cfg, name)}")
    for name in ("carrier_frequency", "sigma_c2", "sigma_r2", "P_t", "T_max", "U_l", "Q_l",
                 "kappa", "nu", "iota", "F_max", "nf_aperture", "range_min", "cluster_radius"):
        value = getattr(cfg, name)
        if not (math.isfinite(value) and value > 0):
            raise ConfigError(f"{name} must be finite and > 0, got {value}")
    if not cfg.xi > 0:
        raise ConfigError(f"xi must be > 0, got {cfg.xi}")
    if cfg.C_i < 0:
        raise ConfigError(f"C_i must be >= 0, got {cfg.C_i}")
    if cfg.f_bar_l < 0:
        raise ConfigError(f"f_bar_l must be >= 0, got {cfg.f_bar_l}")
    if cfg.K + cfg.L > cfg.n_t:
        raise ConfigError(f"K + L = {cfg.K + cfg.L} exceeds n_tx*n_tz = {cfg.n_t}")
    if cfg.n_t >= cfg.n_r:
        raise ConfigError(f"n_tx*n_tz = {cfg.n_t} must be below n_rx*n_rz = {cfg.n_r}")
    if cfg.F <= cfg.n_t:
        raise ConfigError(f"F = {cfg.F} must exceed n_tx*n_tz = {cfg.n_t}")
    if cfg.rx_spacing is not None and cfg.rx_spacing <= 0:
        raise ConfigError(f"rx_spacing must be > 0, got {cfg.rx_spacing}")
    if cfg.tx_pitch is not None and cfg.tx_pitch <= 0:
        raise ConfigError(f"tx_pitch must be > 0, got {cfg.tx_pitch}")
    if cfg.n_t > 1 and cfg.tx_grid_pitch <= 0:
        raise ConfigError("C_i = 0 collapses the Tx grid; set tx_pitch for a fixed array")
    if cfg.movable_range > cfg.tx_grid_pitch + 1e-12 and cfg.n_t > 1:
        raise ConfigError(f"C_i box side {cfg.movable_range} exceeds tx_pitch {cfg.tx_grid_pitch}; boxes would overlap")

    # semantic parameters
    if not 0 < cfg.varrho <= 1:
        raise ConfigError(f"varrho must lie in (0, 1], got {cfg.varrho}")
    if len(cfg.semantic_weights) != len(cfg.semantic_precisions) or not cfg.semantic_weights:
        raise ConfigError("semantic_weights and semantic_precisions must be non-empty and equally long")
    if any(not 0 < p <= 1 for p in cfg.semantic_precisions):
        raise ConfigError(f"semantic_precisions must lie in (0, 1], got {list(cfg.semantic_precisions)}")
    if abs(sum(cfg.semantic_weights) - 1.0) > 1e-9:
        raise ConfigError(f"semantic_weights must sum to 1, got {sum(cfg.semantic_weights)}")
    rho_lb = cfg.rho_lb
    if not 0 < rho_lb <= 1:
        raise ConfigError(f"semantic parameters give rho_LB = {rho_lb:.4f} outside (0, 1]")

    # placement window must sit inside the near field
    from scenario import rayleigh_distance
    limit = rayleigh_distance(cfg.nf_aperture, cfg.wavelength)
    if not 5 * cfg.wavelength < cfg.range_min < cfg.range_max:
        raise ConfigError(f"range_min must satisfy 5*lambda < range_min < range_max, got {cfg.range_min}")
    if cfg.range_max + cfg.cluster_radius >= limit:
        raise ConfigError(f"range_max + cluster_radius = {cfg.range_max + cfg.cluster_radius} m "
                          f"is not inside the Rayleigh distance {limit:.2f} m")
    if cfg.range_min - cfg.cluster_radius <= 5 * cfg.wavelength:
        raise ConfigError(f"cluster_radius = {cfg.cluster_radius} pushes scatterers out of the near field")

    # tolerances
    if not 0 < cfg.shrink_factor < 1:
        raise ConfigError(f"shrink_factor must lie in (0, 1), got {cfg.shrink_factor}")
    if not 0 < cfg.armijo_c < 1:
        raise ConfigError(f"armijo_c must lie in (0, 1), got {cfg.armijo_c}")
    for name in ("sca_tol", "kkt_tol", "bisection_tol", "ao_tol", "grad_fd_step", "tau_init",
                 "tau_min", "curvature_eps", "bfgs_tol", "softmin_beta", "bfgs_initial_step", "crb_margin"):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be > 0, got {getattr(cfg, name)}")
    for name in ("max_sca_epochs", "max_bfgs_epochs", "max_ao_epochs", "randomization_samples"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(cfg, name)}")


def _coerce(name: str, value, default):
    """Cast a raw JSON value to the type of the field default."""
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be an array, got {value!r}")
        return tuple(float(v) for v in value)
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"{name} must be numeric, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, str):
        return str(value)
    if value is None:
        return None
    return float(value)


def config_from_dict(raw: Dict) -> SystemConfig:
    """Build a validated SystemConfig from a flat mapping of field names."""
    known = {f.name: f for f in fields(SystemConfig)}
    defaults = SystemConfig()
    values = {}
    for key, value in raw.items():
        name = key
        if key.endswith(DBM_SUFFIX):
            name = key[:-len(DBM_SUFFIX)]
            if name not in ("P_t", "sigma_c2", "sigma_r2"):
                raise ConfigError(f"unknown config key: {key}")
            if name in raw:
                raise ConfigError(f"{name} given both linear and as {key}")
            value = dbm_to_linear(float(value))
        elif key not in known:
            raise ConfigError(f"unknown config key: {key}")
        default = getattr(defaults, name)
        if default is None:
            values[name] = None if value is None else float(value)
        else:
            try:
                values[name] = _coerce(name, value, default)
            except (TypeError, ValueError) as e:
                if isinstance(e, ConfigError):
                    raise
                raise ConfigError(f"{name}: cannot parse {value!r}") from e
    cfg = SystemConfig(**values)
    validate_config(cfg)
    return cfg


def load_config(path) -> SystemConfig:
    """Read a JSON config file; omitted fields take the defaults."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return config_from_dict({})
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(raw)


def get_default_config() -> SystemConfig:
    """Validated defaults."""
    return config_from_dict({})
