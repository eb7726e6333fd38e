"""Occupancy mapping from point clouds with temporal confidence filtering.

Pipeline per sensor frame:
  M0    instantaneous hit grid (cloud projected to cells),
  Mbar  unnormalized truncated-Gaussian blur of M0,
  Gamma per-cell confidence integrated exactly over the frame interval:
            d(Gamma)/dt = -beta_minus * Gamma              if Mbar < switch
            d(Gamma)/dt =  beta_plus * Mbar * (1 - Gamma)  if Mbar >= switch
  Mhat  hysteresis-thresholded binary occupancy (tau_low / tau_high).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .grids import GridSpec, ScalarGrid2D


@dataclass(frozen=True)
class PointCloud:
    """World-frame 2-D points with the capture time. Points are assumed
    pre-filtered (no ground returns or self-detections)."""

    points: np.ndarray
    timestamp: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class MapperConfig:
    kernel_radius: int = 2        # cells; kernel window is the (2r+1)^2 square
    kernel_sigma: float = 1.0     # cells
    switch: float = 1.5           # Mbar level separating decay from growth
    beta_minus: float = 4.0       # 1/s, confidence decay rate
    beta_plus: float = 6.0        # 1/s, confidence growth rate scale
    tau_high: float = 0.6         # Gamma level that turns a cell occupied
    tau_low: float = 0.3          # Gamma level that turns a cell free again
    gamma_init: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.tau_low < self.tau_high <= 1.0):
            raise ValueError("need 0 <= tau_low < tau_high <= 1")
        if self.kernel_radius < 0 or self.kernel_sigma <= 0.0:
            raise ValueError("bad kernel parameters")
        if self.beta_minus < 0.0 or self.beta_plus < 0.0:
            raise ValueError("rates must be nonnegative")
        if not 0.0 <= self.gamma_init <= 1.0:
            raise ValueError("gamma_init must lie in [0, 1]")


@dataclass(frozen=True)
class MapperState:
    """Everything the mapper carries between frames."""

    m0: ScalarGrid2D
    m_bar: ScalarGrid2D
    gamma: ScalarGrid2D
    m_hat: ScalarGrid2D
    last_update: float

    @staticmethod
    def initial(spec: GridSpec, t0: float, cfg: MapperConfig) -> "MapperState":
        """Start fully unknown-free: no hits, confidence at gamma_init,
        estimate all free."""
        zeros = np.zeros((spec.nx, spec.ny))
        return MapperState(
            m0=ScalarGrid2D(spec, zeros),
            m_bar=ScalarGrid2D(spec, zeros),
            gamma=ScalarGrid2D(spec, np.full_like(zeros, cfg.gamma_init)),
            m_hat=ScalarGrid2D(spec, zeros),
            last_update=t0,
        )


def project_cloud(spec: GridSpec, cloud: PointCloud) -> ScalarGrid2D:
    """Binary hit grid: 1 where any point falls, rounded to the nearest cell
    center. Points off the grid are dropped."""
    m0 = np.zeros((spec.nx, spec.ny))
    if len(cloud.points):
        idx = np.round((cloud.points - [spec.origin_x, spec.origin_y]) / spec.resolution)
        idx = idx.astype(np.int64)
        ok = ((idx[:, 0] >= 0) & (idx[:, 0] < spec.nx)
              & (idx[:, 1] >= 0) & (idx[:, 1] < spec.ny))
        m0[idx[ok, 0], idx[ok, 1]] = 1.0
    return ScalarGrid2D(spec, m0)


def gaussian_kernel(cfg: MapperConfig) -> np.ndarray:
    """Unnormalized truncated Gaussian on the square window: weight
    exp(-d^2 / (2 sigma^2)) at Euclidean cell distance d, center weight 1."""
    r = cfg.kernel_radius
    d = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(d, d, indexing="ij")
    return np.exp(-(dx ** 2 + dy ** 2) / (2.0 * cfg.kernel_sigma ** 2))


def convolve(m0: ScalarGrid2D, cfg: MapperConfig) -> ScalarGrid2D:
    """Mbar = K * M0 with zero padding. Mbar >= M0 wherever M0 = 1 because
    the center weight is 1 and all weights are nonnegative."""
    out = convolve2d(m0.values, gaussian_kernel(cfg), mode="same", boundary="fill")
    return m0.with_values(out)


def update_confidence(gamma: ScalarGrid2D, m_bar: ScalarGrid2D,
                      cfg: MapperConfig, dt: float) -> ScalarGrid2D:
    """Exact exponential integration of the switched confidence dynamics
    over dt, holding Mbar constant across the interval."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    g = gamma.values
    mb = m_bar.values
    grow = mb >= cfg.switch
    out = np.where(
        grow,
        1.0 - (1.0 - g) * np.exp(-cfg.beta_plus * mb * dt),
        g * np.exp(-cfg.beta_minus * dt),
    )
    return gamma.with_values(np.clip(out, 0.0, 1.0))


def threshold_hysteresis(gamma: ScalarGrid2D, m_hat_prev: ScalarGrid2D,
                         cfg: MapperConfig) -> ScalarGrid2D:
    """Binary estimate with a dead band: occupied above tau_high, free below
    tau_low, previous value held in between."""
    g = gamma.values
    out = np.where(g >= cfg.tau_high, 1.0,
                   np.where(g <= cfg.tau_low, 0.0, m_hat_prev.values))
    return gamma.with_values(out)


def step_mapper(state: MapperState, cloud: PointCloud, cfg: MapperConfig,
                spec: GridSpec) -> MapperState:
    """One full mapper frame. The cloud must be newer than the state."""
    if cloud.timestamp <= state.last_update:
        raise ValueError(
            f"cloud at t={cloud.timestamp} is not newer than state at t={state.last_update}")
    dt = cloud.timestamp - state.last_update
    m0 = project_cloud(spec, cloud)
    m_bar = convolve(m0, cfg)
    gamma = update_confidence(state.gamma, m_bar, cfg, dt)
    m_hat = threshold_hysteresis(gamma, state.m_hat, cfg)
    return MapperState(m0=m0, m_bar=m_bar, gamma=gamma, m_hat=m_hat,
                       last_update=cloud.timestamp)
