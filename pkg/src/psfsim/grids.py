"""Core field containers shared by every layer: 2-D scalar grids over a world
frame, orientation-lifted field stacks with trilinear sampling and finite
difference gradients, the robot footprint, and the grid file format.

Conventions, used everywhere downstream:
  - cell (ix, iy) has its center at (origin_x + ix*res, origin_y + iy*res),
  - arrays are indexed [ix, iy] (x-major); stacks are [k, ix, iy] with layer k
    covering heading k * theta_period / n_theta,
  - sampling outside the cell-center hull raises DomainError rather than
    extrapolating.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .geometry import polygon_coverage_points, segment_points

TWO_PI = 2.0 * np.pi


class DomainError(ValueError):
    """Raised when a query point leaves the interpolable grid region."""


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a world-frame grid (shared by all layers of a stack).

    origin_x, origin_y : world position of cell (0, 0)'s center, meters
    resolution         : cell pitch, meters, > 0
    nx, ny             : cell counts, >= 3 each
    n_theta            : heading layers, >= 1
    theta_period       : heading wrap period, radians
    """

    origin_x: float
    origin_y: float
    resolution: float
    nx: int
    ny: int
    n_theta: int = 1
    theta_period: float = TWO_PI

    def __post_init__(self):
        if self.resolution <= 0.0:
            raise ValueError("resolution must be positive")
        if self.nx < 3 or self.ny < 3:
            raise ValueError("grid needs at least 3 cells per axis")
        if self.n_theta < 1:
            raise ValueError("n_theta must be >= 1")
        if self.theta_period <= 0.0:
            raise ValueError("theta_period must be positive")

    @property
    def theta_step(self) -> float:
        return self.theta_period / self.n_theta

    @property
    def x_max(self) -> float:
        return self.origin_x + (self.nx - 1) * self.resolution

    @property
    def y_max(self) -> float:
        return self.origin_y + (self.ny - 1) * self.resolution

    def cell_center(self, ix: int, iy: int):
        return (self.origin_x + ix * self.resolution,
                self.origin_y + iy * self.resolution)

    def cell_centers(self):
        """Meshgrid of cell center coordinates, shapes (nx, ny)."""
        xs = self.origin_x + self.resolution * np.arange(self.nx)
        ys = self.origin_y + self.resolution * np.arange(self.ny)
        return np.meshgrid(xs, ys, indexing="ij")

    def contains_point(self, x: float, y: float) -> bool:
        return (self.origin_x <= x <= self.x_max) and (self.origin_y <= y <= self.y_max)

    def layer_theta(self, k: int) -> float:
        return k * self.theta_step

    def same_geometry(self, other: "GridSpec") -> bool:
        return (self.origin_x == other.origin_x and self.origin_y == other.origin_y
                and self.resolution == other.resolution
                and self.nx == other.nx and self.ny == other.ny)


def world_to_cell(spec: GridSpec, p) -> Optional[tuple]:
    """Nearest-center cell index for a world point, None if off the grid."""
    ix = int(round((float(p[0]) - spec.origin_x) / spec.resolution))
    iy = int(round((float(p[1]) - spec.origin_y) / spec.resolution))
    if 0 <= ix < spec.nx and 0 <= iy < spec.ny:
        return ix, iy
    return None


def _frozen(values: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(values, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ScalarGrid2D:
    """One scalar value per cell. Immutable after construction."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != (self.spec.nx, self.spec.ny):
            raise ValueError(f"values shape {v.shape} != ({self.spec.nx}, {self.spec.ny})")
        object.__setattr__(self, "values", _frozen(v))

    def with_values(self, values: np.ndarray) -> "ScalarGrid2D":
        return ScalarGrid2D(self.spec, values)


class FieldGradient(NamedTuple):
    """Spatial gradient of a stack sample. one_sided marks a query close
    enough to the hull that a central difference was not available."""

    dx: float
    dy: float
    dtheta: float
    one_sided: bool

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta])


@dataclass(frozen=True)
class PsfStack:
    """Orientation-lifted scalar field: one 2-D layer per heading bin,
    stamped with the solve time. values has shape (n_theta, nx, ny)."""

    spec: GridSpec
    values: np.ndarray
    timestamp: float

    def __post_init__(self):
        v = np.asarray(self.values)
        expect = (self.spec.n_theta, self.spec.nx, self.spec.ny)
        if v.shape != expect:
            raise ValueError(f"values shape {v.shape} != {expect}")
        object.__setattr__(self, "values", _frozen(v))

    def layer(self, k: int) -> ScalarGrid2D:
        return ScalarGrid2D(self.spec, self.values[k])

    def sample(self, q) -> float:
        return sample_trilinear(self, q)

    def gradient(self, q) -> FieldGradient:
        return gradient_xy(self, q)


def _bilinear_layer_weights(spec: GridSpec, x: float, y: float):
    """Cell indices and weights for bilinear interpolation at (x, y)."""
    fx = (x - spec.origin_x) / spec.resolution
    fy = (y - spec.origin_y) / spec.resolution
    eps = 1e-9
    if fx < -eps or fx > spec.nx - 1 + eps or fy < -eps or fy > spec.ny - 1 + eps:
        raise DomainError(f"point ({x:.4f}, {y:.4f}) outside grid hull")
    fx = min(max(fx, 0.0), spec.nx - 1.0)
    fy = min(max(fy, 0.0), spec.ny - 1.0)
    i0 = min(int(fx), spec.nx - 2)
    j0 = min(int(fy), spec.ny - 2)
    wx = fx - i0
    wy = fy - j0
    return i0, j0, wx, wy


def _theta_layer_weights(spec: GridSpec, theta: float):
    """Wrapped linear interpolation weights across heading layers."""
    if spec.n_theta == 1:
        return 0, 0, 0.0
    ft = (theta % spec.theta_period) / spec.theta_step
    k0 = int(ft) % spec.n_theta
    wt = ft - int(ft)
    k1 = (k0 + 1) % spec.n_theta
    return k0, k1, wt


def _sample_layer_bilinear(layer: np.ndarray, i0, j0, wx, wy) -> float:
    v00 = layer[i0, j0]
    v10 = layer[i0 + 1, j0]
    v01 = layer[i0, j0 + 1]
    v11 = layer[i0 + 1, j0 + 1]
    return float((1 - wx) * ((1 - wy) * v00 + wy * v01) + wx * ((1 - wy) * v10 + wy * v11))


def sample_trilinear(stack: PsfStack, q) -> float:
    """Bilinear in (x, y), linear with wraparound in theta."""
    x, y, theta = float(q[0]), float(q[1]), float(q[2])
    spec = stack.spec
    i0, j0, wx, wy = _bilinear_layer_weights(spec, x, y)
    k0, k1, wt = _theta_layer_weights(spec, theta)
    v0 = _sample_layer_bilinear(stack.values[k0], i0, j0, wx, wy)
    if wt == 0.0:
        return v0
    v1 = _sample_layer_bilinear(stack.values[k1], i0, j0, wx, wy)
    return (1 - wt) * v0 + wt * v1


def gradient_xy(stack: PsfStack, q) -> FieldGradient:
    """Central differences of the interpolated field with a one-cell step in
    x and y and a one-layer step in theta. Near the hull the affected axis
    falls back to a one-sided difference and the result is flagged."""
    x, y, theta = float(q[0]), float(q[1]), float(q[2])
    spec = stack.spec
    res = spec.resolution
    one_sided = False

    def axis_diff(lo_ok: bool, hi_ok: bool, lo_val: float, hi_val: float, center: float, step: float):
        nonlocal one_sided
        if lo_ok and hi_ok:
            return (hi_val - lo_val) / (2.0 * step)
        one_sided = True
        if hi_ok:
            return (hi_val - center) / step
        return (center - lo_val) / step

    center = sample_trilinear(stack, q)

    x_lo_ok = x - res >= spec.origin_x - 1e-9
    x_hi_ok = x + res <= spec.x_max + 1e-9
    if not (x_lo_ok or x_hi_ok):
        raise DomainError("grid too narrow for x gradient")
    gx = axis_diff(x_lo_ok, x_hi_ok,
                   sample_trilinear(stack, (x - res, y, theta)) if x_lo_ok else 0.0,
                   sample_trilinear(stack, (x + res, y, theta)) if x_hi_ok else 0.0,
                   center, res)

    y_lo_ok = y - res >= spec.origin_y - 1e-9
    y_hi_ok = y + res <= spec.y_max + 1e-9
    if not (y_lo_ok or y_hi_ok):
        raise DomainError("grid too narrow for y gradient")
    gy = axis_diff(y_lo_ok, y_hi_ok,
                   sample_trilinear(stack, (x, y - res, theta)) if y_lo_ok else 0.0,
                   sample_trilinear(stack, (x, y + res, theta)) if y_hi_ok else 0.0,
                   center, res)

    if spec.n_theta == 1:
        gt = 0.0
    else:
        dt = spec.theta_step
        gt = (sample_trilinear(stack, (x, y, theta + dt))
              - sample_trilinear(stack, (x, y, theta - dt))) / (2.0 * dt)

    return FieldGradient(gx, gy, gt, one_sided)


def _weights_many(spec: GridSpec, x, y, theta):
    """Vectorized interpolation weights for pose arrays. Rows outside the
    hull come back with in_hull False and clamped (safe) indices instead
    of raising."""
    fx = (x - spec.origin_x) / spec.resolution
    fy = (y - spec.origin_y) / spec.resolution
    eps = 1e-9
    in_hull = ((fx >= -eps) & (fx <= spec.nx - 1 + eps)
               & (fy >= -eps) & (fy <= spec.ny - 1 + eps))
    fx = np.clip(np.where(in_hull, fx, 0.0), 0.0, spec.nx - 1.0)
    fy = np.clip(np.where(in_hull, fy, 0.0), 0.0, spec.ny - 1.0)
    i0 = np.minimum(np.floor(fx), spec.nx - 2).astype(np.intp)
    j0 = np.minimum(np.floor(fy), spec.ny - 2).astype(np.intp)
    wx = fx - i0
    wy = fy - j0
    if spec.n_theta == 1:
        k0 = np.zeros(fx.shape, dtype=np.intp)
        k1, wt = k0, np.zeros_like(fx)
    else:
        ft = (theta % spec.theta_period) / spec.theta_step
        kf = np.floor(ft)
        k0 = kf.astype(np.intp) % spec.n_theta
        k1 = (k0 + 1) % spec.n_theta
        wt = ft - kf
    return in_hull, k0, k1, wt, i0, j0, wx, wy


def _gather_bilinear(values: np.ndarray, k, i0, j0, wx, wy):
    """Bilinear sample of layer k[r] at row r's cell and weights."""
    ny = values.shape[2]
    flat = values.reshape(values.shape[0], -1)
    base = i0 * ny + j0
    v00 = flat[k, base]
    v10 = flat[k, base + ny]
    v01 = flat[k, base + 1]
    v11 = flat[k, base + ny + 1]
    return (1 - wx) * ((1 - wy) * v00 + wy * v01) + wx * ((1 - wy) * v10 + wy * v11)


def sample_many(stack: PsfStack, qs: np.ndarray):
    """Vectorized sample_trilinear over an (n, 3) pose array. Returns
    (values, in_hull); rows outside the hull get nan instead of raising."""
    qs = np.asarray(qs, dtype=float)
    in_hull, k0, k1, wt, i0, j0, wx, wy = _weights_many(
        stack.spec, qs[:, 0], qs[:, 1], qs[:, 2])
    v0 = _gather_bilinear(stack.values, k0, i0, j0, wx, wy)
    v1 = _gather_bilinear(stack.values, k1, i0, j0, wx, wy)
    vals = np.where(wt == 0.0, v0, (1 - wt) * v0 + wt * v1)
    return np.where(in_hull, vals, np.nan), in_hull


def value_gradient_many(stack: PsfStack, qs: np.ndarray):
    """Vectorized (sample_trilinear, gradient_xy) over an (n, 3) pose
    array, sharing the centre sample between the two. Returns (values,
    grads, val_ok, grad_ok): val_ok marks rows whose value is defined,
    grad_ok rows where every gradient probe the scalar path would take
    also stays inside the hull. Bad rows get nan values / zero rows."""
    qs = np.asarray(qs, dtype=float)
    n = len(qs)
    spec = stack.spec
    res = spec.resolution
    x, y, theta = qs[:, 0], qs[:, 1], qs[:, 2]

    x_lo = x - res >= spec.origin_x - 1e-9
    x_hi = x + res <= spec.x_max + 1e-9
    y_lo = y - res >= spec.origin_y - 1e-9
    y_hi = y + res <= spec.y_max + 1e-9

    # Probe layout: centre, x-lo, x-hi, y-lo, y-hi (, theta+, theta-).
    shifts = [(0.0, 0.0, 0.0), (-res, 0.0, 0.0), (res, 0.0, 0.0),
              (0.0, -res, 0.0), (0.0, res, 0.0)]
    if spec.n_theta > 1:
        dt = spec.theta_step
        shifts += [(0.0, 0.0, dt), (0.0, 0.0, -dt)]
    probes = qs[None, :, :] + np.asarray(shifts)[:, None, :]
    m = len(shifts)
    flat = probes.reshape(m * n, 3)
    hull, k0, k1, wt, i0, j0, wx, wy = _weights_many(
        spec, flat[:, 0], flat[:, 1], flat[:, 2])
    v0 = _gather_bilinear(stack.values, k0, i0, j0, wx, wy)
    v1 = _gather_bilinear(stack.values, k1, i0, j0, wx, wy)
    v = np.where(wt == 0.0, v0, (1 - wt) * v0 + wt * v1).reshape(m, n)
    hull = hull.reshape(m, n)

    val_ok = hull[0]
    # The scalar path probes each in-bounds side before picking a branch,
    # so a probe that leaves the hull kills the whole gradient.
    grad_ok = val_ok & (x_lo | x_hi) & (y_lo | y_hi)
    grad_ok &= (~x_lo | hull[1]) & (~x_hi | hull[2])
    grad_ok &= (~y_lo | hull[3]) & (~y_hi | hull[4])

    c = v[0]
    gx = np.where(x_lo & x_hi, (v[2] - v[1]) / (2.0 * res),
                  np.where(x_hi, (v[2] - c) / res, (c - v[1]) / res))
    gy = np.where(y_lo & y_hi, (v[4] - v[3]) / (2.0 * res),
                  np.where(y_hi, (v[4] - c) / res, (c - v[3]) / res))
    if spec.n_theta == 1:
        gt = np.zeros(n)
    else:
        gt = (v[5] - v[6]) / (2.0 * spec.theta_step)

    vals = np.where(val_ok, c, np.nan)
    grads = np.stack([gx, gy, gt], axis=1)
    grads[~grad_ok] = 0.0
    return vals, grads, val_ok, grad_ok


@dataclass(frozen=True)
class RobotFootprint:
    """Robot body in the body frame. Three shapes are understood from the
    point list: a single point, a segment (2 points), or a polygon (>= 3
    vertices in order). Coverage points sample the occupied set densely
    enough for rasterized erosion."""

    body_points: np.ndarray
    rectangle_size: Optional[tuple] = None   # (length, width) when built by rectangle()

    def __post_init__(self):
        pts = np.asarray(self.body_points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
            raise ValueError("body_points must be a nonempty (n, 2) array")
        object.__setattr__(self, "body_points", _frozen(pts))

    @staticmethod
    def rectangle(length: float, width: float) -> "RobotFootprint":
        hl, hw = 0.5 * length, 0.5 * width
        return RobotFootprint(np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]]),
                              rectangle_size=(length, width))

    def coverage_points(self, spacing: float) -> np.ndarray:
        pts = self.body_points
        if len(pts) == 1:
            return pts.copy()
        if len(pts) == 2:
            return segment_points(pts[0], pts[1], spacing)
        return polygon_coverage_points(pts, spacing)

    def cell_offsets(self, theta: float, resolution: float) -> np.ndarray:
        """Unique integer cell offsets covered by the footprint rotated to
        heading theta, sampled at half-resolution spacing."""
        pts = self.coverage_points(0.5 * resolution)
        c, s = np.cos(theta), np.sin(theta)
        rot = pts @ np.array([[c, s], [-s, c]])
        cells = np.round(rot / resolution).astype(np.int64)
        return np.unique(cells, axis=0)


# Grid file format: a JSON header next to a raw little-endian float64 binary.
_FORMAT = "psf-grid-v1"


def save_stack(stack: PsfStack, basepath) -> tuple:
    """Write `<base>.json` + `<base>.bin`. Layout: layer-major, then x-major
    rows (C order of the (n_theta, nx, ny) array)."""
    base = Path(basepath)
    spec = stack.spec
    header = {
        "format": _FORMAT,
        "origin": [spec.origin_x, spec.origin_y],
        "resolution": spec.resolution,
        "nx": spec.nx,
        "ny": spec.ny,
        "n_theta": spec.n_theta,
        "theta_period": spec.theta_period,
        "timestamp": stack.timestamp,
        "dtype": "<f8",
        "layout": "C order (n_theta, nx, ny)",
    }
    json_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    json_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    data = np.ascontiguousarray(stack.values, dtype="<f8")
    bin_path.write_bytes(data.tobytes())
    return json_path, bin_path


def load_stack(basepath) -> PsfStack:
    base = Path(basepath)
    header = json.loads(base.with_suffix(".json").read_text())
    if header.get("format") != _FORMAT:
        raise ValueError(f"unrecognized grid format: {header.get('format')!r}")
    spec = GridSpec(
        origin_x=header["origin"][0],
        origin_y=header["origin"][1],
        resolution=header["resolution"],
        nx=header["nx"],
        ny=header["ny"],
        n_theta=header["n_theta"],
        theta_period=header.get("theta_period", TWO_PI),
    )
    raw = base.with_suffix(".bin").read_bytes()
    expect = spec.n_theta * spec.nx * spec.ny * 8
    if len(raw) != expect:
        raise ValueError(f"binary payload is {len(raw)} bytes, expected {expect}")
    values = np.frombuffer(raw, dtype="<f8").reshape(spec.n_theta, spec.nx, spec.ny)
    return PsfStack(spec, values, header["timestamp"])


def save_grid(grid: ScalarGrid2D, basepath, timestamp: float = 0.0) -> tuple:
    spec = grid.spec
    flat_spec = GridSpec(spec.origin_x, spec.origin_y, spec.resolution,
                         spec.nx, spec.ny, n_theta=1, theta_period=spec.theta_period)
    return save_stack(PsfStack(flat_spec, grid.values[None, :, :], timestamp), basepath)


def load_grid(basepath) -> ScalarGrid2D:
    stack = load_stack(basepath)
    if stack.spec.n_theta != 1:
        raise ValueError("expected a single-layer grid file")
    return ScalarGrid2D(stack.spec, stack.values[0])
