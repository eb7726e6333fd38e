"""Deterministic 2-D world for exercising the filter stack: a rectangular
arena with static polygon/disc obstacles and constant-velocity moving discs,
a ring scanner with Gaussian range noise and dropout, single-integrator
robot kinematics with optional first-order velocity tracking and actuator
saturation, plus the ground-truth collision check (pure geometry, never the
occupancy grid) and the composite-barrier monitor trace.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Optional

import numpy as np

from . import geometry
from .grids import GridSpec, RobotFootprint
from .mapping import MapperConfig, PointCloud
from .poisson import PoissonConfig
from .predictive import MpcConfig
from .realtime import IssfConfig, composite_barrier


@dataclass(frozen=True)
class StaticDisc:
    center: tuple
    radius: float


@dataclass(frozen=True)
class MovingDisc:
    """Constant-velocity disc; absent from the world before start_time."""

    radius: float
    start: tuple
    velocity: tuple
    start_time: float = 0.0

    def position(self, t: float):
        dt = t - self.start_time
        return (self.start[0] + self.velocity[0] * dt,
                self.start[1] + self.velocity[1] * dt)

    def active(self, t: float) -> bool:
        return t >= self.start_time


@dataclass(frozen=True)
class SensorConfig:
    rate: float = 15.0
    n_rays: int = 360
    max_range: float = 8.0
    noise_std: float = 0.01
    dropout: float = 0.05


@dataclass(frozen=True)
class TrackingConfig:
    mode: str = "perfect"          # "perfect" | "first_order"
    time_constant: float = 0.1

    def __post_init__(self):
        if self.mode not in ("perfect", "first_order"):
            raise ValueError(f"unknown tracking mode {self.mode!r}")
        if self.mode == "first_order" and self.time_constant <= 0.0:
            raise ValueError("time_constant must be positive")


@dataclass(frozen=True)
class RobotConfig:
    footprint: RobotFootprint
    start: tuple                    # (x, y, theta)
    tracking: TrackingConfig = TrackingConfig()
    command_limits: Optional[tuple] = None   # (vx, vy, omega) absolute bounds


@dataclass(frozen=True)
class MonitorConfig:
    mu_bar: float = 10.0
    beta: float = 1.0


@dataclass(frozen=True)
class NominalSegment:
    t_start: float
    mu: tuple


@dataclass(frozen=True)
class Scenario:
    name: str
    arena: tuple                    # (xmin, xmax, ymin, ymax)
    robot: RobotConfig
    duration: float
    seed: int = 0
    resolution: float = 0.05
    n_theta: int = 16
    static_polygons: tuple = ()
    static_discs: tuple = ()
    moving_discs: tuple = ()
    nominal: tuple = (NominalSegment(0.0, (0.0, 0.0, 0.0)),)
    sensor: SensorConfig = SensorConfig()
    mapper: MapperConfig = MapperConfig()
    poisson: PoissonConfig = PoissonConfig()
    mpc: MpcConfig = MpcConfig()
    issf: IssfConfig = IssfConfig()
    monitor: MonitorConfig = MonitorConfig()

    def __post_init__(self):
        xmin, xmax, ymin, ymax = self.arena
        if xmax <= xmin or ymax <= ymin:
            raise ValueError("degenerate arena extents")
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")
        if not self.nominal or self.nominal[0].t_start > 0.0:
            raise ValueError("nominal schedule must start at t <= 0")

    def grid_spec(self) -> GridSpec:
        xmin, xmax, ymin, ymax = self.arena
        nx = int(round((xmax - xmin) / self.resolution)) + 1
        ny = int(round((ymax - ymin) / self.resolution)) + 1
        return GridSpec(origin_x=xmin, origin_y=ymin, resolution=self.resolution,
                        nx=nx, ny=ny, n_theta=self.n_theta)

    def nominal_command(self, t: float) -> np.ndarray:
        mu = self.nominal[0].mu
        for seg in self.nominal:
            if seg.t_start <= t:
                mu = seg.mu
            else:
                break
        return np.asarray(mu, dtype=float)

    def wall_segments(self):
        xmin, xmax, ymin, ymax = self.arena
        corners = [(xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)]
        return [(corners[i], corners[(i + 1) % 4]) for i in range(4)]


@dataclass
class WorldState:
    t: float
    chi: np.ndarray
    chi_dot: np.ndarray

    @staticmethod
    def initial(scenario: Scenario) -> "WorldState":
        return WorldState(t=0.0,
                          chi=np.asarray(scenario.robot.start, dtype=float).copy(),
                          chi_dot=np.zeros(3))


def apply_limits(cmd: np.ndarray, limits) -> np.ndarray:
    if limits is None:
        return cmd
    lim = np.asarray(limits, dtype=float)
    return np.clip(cmd, -lim, lim)


def step_world(scenario: Scenario, state: WorldState, cmd, dt: float) -> WorldState:
    """Advance the robot one tick under the commanded velocity. Saturation
    (command_limits) and tracking lag model the gap between the reduced
    single-integrator model and the physical platform."""
    cmd = apply_limits(np.asarray(cmd, dtype=float), scenario.robot.command_limits)
    tr = scenario.robot.tracking
    if tr.mode == "perfect":
        chi_dot = cmd.copy()
    else:
        gain = dt / tr.time_constant
        chi_dot = state.chi_dot + gain * (cmd - state.chi_dot)
    chi = state.chi + chi_dot * dt
    return WorldState(t=state.t + dt, chi=chi, chi_dot=chi_dot)


def scan(scenario: Scenario, chi, t: float, rng: np.random.Generator) -> PointCloud:
    """One ring sweep from the robot center: n_rays bearings offset by the
    robot heading, nearest hit among walls and obstacles, Gaussian range
    noise, Bernoulli dropout. Rays that hit nothing within max_range
    contribute no point."""
    sc = scenario.sensor
    origin = np.array([chi[0], chi[1]], dtype=float)
    points = []
    walls = scenario.wall_segments()
    for k in range(sc.n_rays):
        bearing = chi[2] + 2.0 * np.pi * k / sc.n_rays
        direction = np.array([np.cos(bearing), np.sin(bearing)])
        best = None
        for a, b in walls:
            hit = geometry.ray_segment(origin, direction, a, b)
            if hit is not None and (best is None or hit < best):
                best = hit
        for poly in scenario.static_polygons:
            hit = geometry.ray_polygon(origin, direction, np.asarray(poly, dtype=float))
            if hit is not None and (best is None or hit < best):
                best = hit
        for disc in scenario.static_discs:
            hit = geometry.ray_circle(origin, direction, disc.center, disc.radius)
            if hit is not None and (best is None or hit < best):
                best = hit
        for disc in scenario.moving_discs:
            if disc.active(t):
                hit = geometry.ray_circle(origin, direction, disc.position(t), disc.radius)
                if hit is not None and (best is None or hit < best):
                    best = hit
        if best is None or best > sc.max_range:
            continue
        rng_noisy = best + (rng.normal(0.0, sc.noise_std) if sc.noise_std > 0 else 0.0)
        if sc.dropout > 0 and rng.random() < sc.dropout:
            continue
        points.append(origin + rng_noisy * direction)
    pts = np.array(points) if points else np.zeros((0, 2))
    return PointCloud(points=pts, timestamp=t)


def footprint_world_polygon(footprint: RobotFootprint, chi) -> Optional[np.ndarray]:
    """Footprint vertices in the world frame; None for point/segment shapes."""
    pts = footprint.body_points
    if len(pts) < 3:
        return None
    c, s = np.cos(chi[2]), np.sin(chi[2])
    rot = pts @ np.array([[c, s], [-s, c]])
    return rot + np.array([chi[0], chi[1]])


def collision_check(scenario: Scenario, chi, t: float) -> bool:
    """Ground-truth overlap of the robot body with any obstacle or the
    arena boundary, computed geometrically."""
    poly = footprint_world_polygon(scenario.robot.footprint, chi)
    if poly is None:
        c, s = np.cos(chi[2]), np.sin(chi[2])
        pts = scenario.robot.footprint.body_points @ np.array([[c, s], [-s, c]])
        pts = pts + np.array([chi[0], chi[1]])
    else:
        pts = poly

    xmin, xmax, ymin, ymax = scenario.arena
    if (pts[:, 0].min() < xmin or pts[:, 0].max() > xmax
            or pts[:, 1].min() < ymin or pts[:, 1].max() > ymax):
        return True

    discs = [(d.center, d.radius) for d in scenario.static_discs]
    discs += [(d.position(t), d.radius) for d in scenario.moving_discs if d.active(t)]
    for center, radius in discs:
        if poly is not None:
            if geometry.circle_polygon_intersect(center, radius, poly):
                return True
        else:
            d2 = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])
            if float(d2.min()) <= radius:
                return True
    for obst in scenario.static_polygons:
        obst = np.asarray(obst, dtype=float)
        if poly is not None:
            if geometry.convex_polygons_intersect(poly, obst):
                return True
        else:
            if any(geometry.point_in_polygon(obst, p) for p in pts):
                return True
    return False


def true_occupancy(scenario: Scenario, grid: GridSpec, t: float) -> np.ndarray:
    """Ground-truth occupancy at time t: True where the cell center lies
    inside any obstacle. This is the clairvoyant map the ideal-cost solve
    and the mapper IoU check compare against; the live pipeline never sees it."""
    xs = grid.origin_x + grid.resolution * np.arange(grid.nx)
    ys = grid.origin_y + grid.resolution * np.arange(grid.ny)
    cx, cy = np.meshgrid(xs, ys, indexing="ij")
    occ = np.zeros((grid.nx, grid.ny), dtype=bool)

    discs = [(d.center, d.radius) for d in scenario.static_discs]
    discs += [(d.position(t), d.radius) for d in scenario.moving_discs if d.active(t)]
    for center, radius in discs:
        occ |= (cx - center[0]) ** 2 + (cy - center[1]) ** 2 <= radius ** 2

    for poly in scenario.static_polygons:
        poly = np.asarray(poly, dtype=float)
        in_box = ((cx >= poly[:, 0].min()) & (cx <= poly[:, 0].max())
                  & (cy >= poly[:, 1].min()) & (cy <= poly[:, 1].max()))
        for ix, iy in zip(*np.nonzero(in_box & ~occ)):
            if geometry.point_in_polygon(poly, (cx[ix, iy], cy[ix, iy])):
                occ[ix, iy] = True
    return occ


def monitor_theorem1(h_values, chi_dot, chi_dot_cmd, mu_bar: float, beta: float):
    """Composite-barrier trace B = h - beta ||chi_dot - chi_dot_cmd||^2 / mu_bar
    over an episode. Returns (B, first_violation_index or None)."""
    h_values = np.asarray(h_values, dtype=float)
    err = np.asarray(chi_dot, dtype=float) - np.asarray(chi_dot_cmd, dtype=float)
    v = beta * np.einsum("ij,ij->i", err, err)
    b = np.array([composite_barrier(h, vv, mu_bar) for h, vv in zip(h_values, v)])
    bad = np.flatnonzero(b < 0.0)
    return b, (int(bad[0]) if len(bad) else None)


LOG_COLUMNS = (
    "t", "x", "y", "theta", "vx", "vy", "omega",
    "mud_vx", "mud_vy", "mud_w",
    "mup_vx", "mup_vy", "mup_w",
    "mus_vx", "mus_vy", "mus_w",
    "h", "grad_norm", "barrier_b",
    "rt_margin_before", "rt_margin_after", "rt_active", "rt_degenerate",
    "plan_cost", "plan_sqp_iters", "plan_min_margin", "plan_converged",
    "psf_iterations", "psf_residual",
    "collision", "error_flag",
)


class EpisodeLog:
    """Tick-synchronous record of one episode, one row per real-time tick.
    Columns are fixed (LOG_COLUMNS) so CSV output is stable across runs."""

    def __init__(self):
        self.rows = []

    def append(self, **kwargs):
        missing = set(LOG_COLUMNS) - set(kwargs)
        extra = set(kwargs) - set(LOG_COLUMNS)
        if missing or extra:
            raise ValueError(f"bad log row: missing={sorted(missing)} extra={sorted(extra)}")
        self.rows.append(tuple(float(kwargs[c]) for c in LOG_COLUMNS))

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        i = LOG_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])

    def columns(self, *names) -> np.ndarray:
        idx = [LOG_COLUMNS.index(n) for n in names]
        return np.array([[r[i] for i in idx] for r in self.rows])

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for row in self.rows:
                writer.writerow([f"{v:.17g}" for v in row])

    @staticmethod
    def from_csv(path) -> "EpisodeLog":
        log = EpisodeLog()
        with Path(path).open() as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != LOG_COLUMNS:
                raise ValueError("unexpected log columns")
            for row in reader:
                log.rows.append(tuple(float(v) for v in row))
        return log
