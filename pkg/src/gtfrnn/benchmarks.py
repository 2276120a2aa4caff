"""Ground-truth chaotic benchmark systems (Lorenz-63/96 families).

Trajectories are generated with a fixed-step classical RK4 integrator,
optionally contaminated with Gaussian observation noise and standardized
per dimension.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError

DIVERGENCE_NORM = 1e12

LORENZ63_DEFAULTS = {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}
LORENZ96_DEFAULTS = {"N": 20, "F": 16.0}
MULTISCALE_DEFAULTS = {
    "K": 8, "J": 8, "I": 8,
    "h": 1.0, "b": 10.0, "c": 10.0, "e": 10.0, "d": 10.0,
    "g_Z": 10.0, "F": 20.0,
}


@dataclass(frozen=True)
class OdeSystemSpec:
    """One of the three Lorenz-family ODE systems with its parameters."""

    kind: str  # "lorenz63" | "lorenz96" | "multiscale_lorenz96"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = self.kind.lower()
        defaults = {
            "lorenz63": LORENZ63_DEFAULTS,
            "lorenz96": LORENZ96_DEFAULTS,
            "multiscale_lorenz96": MULTISCALE_DEFAULTS,
        }.get(kind)
        if defaults is None:
            raise ConfigError(f"unknown system kind: {self.kind!r}")
        merged = dict(defaults)
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown parameters for {kind}: {sorted(unknown)}")
        merged.update(self.params)
        for k, v in merged.items():
            if not np.isfinite(v):
                raise ConfigError(f"non-finite parameter {k}={v}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", merged)

    @property
    def state_dim(self) -> int:
        p = self.params
        if self.kind == "lorenz63":
            return 3
        if self.kind == "lorenz96":
            return int(p["N"])
        K, J, I = int(p["K"]), int(p["J"]), int(p["I"])
        return K + K * J + K * J * I


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 0.01
    readout_interval: float = 0.01
    transient_steps: int = 10_000
    total_steps: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        ratio = self.readout_interval / self.dt
        if self.readout_interval < self.dt or abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("readout_interval must be an integer multiple of dt")
        if self.transient_steps < 0 or self.total_steps < 1:
            raise ConfigError("invalid step counts")

    @property
    def substeps(self) -> int:
        return int(round(self.readout_interval / self.dt))


@dataclass
class TrajectoryDataset:
    """A T x N matrix of observations with provenance metadata."""

    data: np.ndarray
    dt: float
    per_dim_mean: np.ndarray
    per_dim_std: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ContractError("data must be a T x N matrix")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("dataset contains non-finite entries")
        self.per_dim_mean = np.asarray(self.per_dim_mean, dtype=np.float64)
        self.per_dim_std = np.asarray(self.per_dim_std, dtype=np.float64)

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def N(self) -> int:
        return self.data.shape[1]


def vector_field(spec: OdeSystemSpec, u: np.ndarray) -> np.ndarray:
    """du/dt of the chosen system evaluated at state u."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (spec.state_dim,):
        raise ContractError(
            f"state has length {u.shape}, expected ({spec.state_dim},)")
    p = spec.params
    if spec.kind == "lorenz63":
        x, y, z = u
        s, r, b = p["sigma"], p["rho"], p["beta"]
        return np.array([s * (y - x), x * (r - z) - y, x * y - b * z])
    if spec.kind == "lorenz96":
        F = p["F"]
        # cyclic neighbor coupling
        return (np.roll(u, -1) - np.roll(u, 2)) * np.roll(u, 1) - u + F
    return _multiscale_field(p, u)


def _multiscale_field(p: dict, u: np.ndarray) -> np.ndarray:
    K, J, I = int(p["K"]), int(p["J"]), int(p["I"])
    h, b, c, e, d = p["h"], p["b"], p["c"], p["e"], p["d"]
    g_Z, F = p["g_Z"], p["F"]
    X = u[:K]
    Y = u[K:K + K * J].reshape(K, J)
    Z = u[K + K * J:].reshape(K, J, I)

    dX = (np.roll(X, 1) * (np.roll(X, -1) - np.roll(X, 2)) - X + F
          - (h * c / b) * Y.sum(axis=1))
    # Y variables wrap along the flattened (K*J) chain, as in the
    # single-scale system extended over all K sectors.
    Yf = Y.reshape(-1)
    dYf = (-c * b * np.roll(Yf, -1) * (np.roll(Yf, -2) - np.roll(Yf, 1))
           - c * Yf
           + (h * c / b) * np.repeat(X, J)
           - (h * e / d) * Z.reshape(K * J, I).sum(axis=1))
    Zf = Z.reshape(-1)
    dZf = (e * d * np.roll(Zf, 1) * (np.roll(Zf, -1) - np.roll(Zf, 2))
           - g_Z * e * Zf
           + (h * e / d) * np.repeat(Yf, I))
    return np.concatenate([dX, dYf, dZf])


def integrate_rk4(spec: OdeSystemSpec, u0: np.ndarray,
                  cfg: IntegratorConfig) -> np.ndarray:
    """Fixed-step RK4 integration sampled at the readout interval.

    Returns a (total_steps, state_dim) array; the first transient_steps
    readout samples are computed but discarded.
    """
    u = np.asarray(u0, dtype=np.float64).copy()
    if u.shape != (spec.state_dim,):
        raise ContractError("initial condition has wrong dimension")
    if not np.all(np.isfinite(u)):
        raise ContractError("initial condition must be finite")

    dt = cfg.dt
    sub = cfg.substeps
    out = np.empty((cfg.total_steps, spec.state_dim))
    total = cfg.transient_steps + cfg.total_steps
    for i in range(total):
        if i >= cfg.transient_steps:
            out[i - cfg.transient_steps] = u
        if i == total - 1:
            break
        for _ in range(sub):
            k1 = vector_field(spec, u)
            k2 = vector_field(spec, u + 0.5 * dt * k1)
            k3 = vector_field(spec, u + 0.5 * dt * k2)
            k4 = vector_field(spec, u + dt * k3)
            u = u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.linalg.norm(u) > DIVERGENCE_NORM:
            raise DivergenceError(
                f"state norm exceeded {DIVERGENCE_NORM:g} at step {i}", step=i)
    return out


def make_dataset(spec: OdeSystemSpec, cfg: IntegratorConfig,
                 noise_frac: float = 0.0, standardize: bool = True,
                 seed: int | None = None,
                 observe_slow_only: bool = False) -> TrajectoryDataset:
    """Simulate one trajectory from a standard-normal initial condition.

    noise_frac adds i.i.d. Gaussian noise with per-dimension std equal
    to noise_frac times the clean per-dimension std. For the multiscale
    system, observe_slow_only restricts the observations to the K slow
    variables.
    """
    if noise_frac < 0:
        raise ContractError("noise_frac must be nonnegative")
    if seed is None:
        seed = cfg.seed
    rng = np.random.default_rng(seed)
    u0 = rng.standard_normal(spec.state_dim)
    data = integrate_rk4(spec, u0, cfg)
    if observe_slow_only:
        if spec.kind != "multiscale_lorenz96":
            raise ConfigError("observe_slow_only only applies to the multiscale system")
        data = data[:, :int(spec.params["K"])]

    if noise_frac > 0:
        clean_std = data.std(axis=0)
        data = data + rng.standard_normal(data.shape) * (noise_frac * clean_std)

    mean = data.mean(axis=0)
    std = data.std(axis=0)
    if standardize:
        data = (data - mean) / std
    else:
        mean = np.zeros(data.shape[1])
        std = np.ones(data.shape[1])
    source = (f"{spec.kind} seed={seed} noise_frac={noise_frac} "
              f"standardize={standardize}")
    return TrajectoryDataset(data, cfg.readout_interval, mean, std, source)


def lorenz63_jacobian(spec: OdeSystemSpec, u: np.ndarray) -> np.ndarray:
    """Jacobian of the Lorenz-63 vector field, for variational integration."""
    if spec.kind != "lorenz63":
        raise ContractError("jacobian only implemented for lorenz63")
    s, r, b = (spec.params[k] for k in ("sigma", "rho", "beta"))
    x, y, z = u
    return np.array([
        [-s, s, 0.0],
        [r - z, -1.0, -x],
        [y, x, -b],
    ])
