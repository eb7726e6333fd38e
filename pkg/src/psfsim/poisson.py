"""Safety function synthesis: free-space erosion over heading bins and the
Poisson solve

    laplacian(h) = f  on free cells,   h = 0  on occupied cells,

with constant forcing f < 0, discretized on the 5-point stencil and solved
with red-black SOR, all heading layers swept as one batch. Occupied cells
(and everything outside the grid, including the border ring) hold exactly 0.

Also provides the two time views consumed by the filters: PsfSnapshot
(current + previous solve, first-order extrapolation ahead of the data) and
ScheduledField (a precomputed timeline of stacks, interpolated in time).
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .grids import (FieldGradient, GridSpec, PsfStack, RobotFootprint,
                    ScalarGrid2D, gradient_xy, sample_trilinear,
                    value_gradient_many)


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class PoissonConfig:
    forcing: float = -4.0
    sor_omega: float = 1.9
    tol: float = 1e-6            # max 5-point residual, field units
    max_iters: int = 10000       # full red+black sweeps
    warm_start: bool = True

    def __post_init__(self):
        if self.forcing >= 0.0:
            raise ValueError("forcing must be negative")
        if not 0.0 < self.sor_omega < 2.0:
            raise ValueError("sor_omega must lie in (0, 2)")
        if self.tol <= 0.0 or self.max_iters < 1:
            raise ValueError("bad solver limits")


@dataclass(frozen=True)
class FreeSpaceMasks:
    """Per-heading boolean free-space masks, shape (n_theta, nx, ny).
    True = the robot at that heading fits with its footprint."""

    spec: GridSpec
    free: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.free, dtype=bool)
        expect = (self.spec.n_theta, self.spec.nx, self.spec.ny)
        if m.shape != expect:
            raise ValueError(f"mask shape {m.shape} != {expect}")
        m = np.ascontiguousarray(m)
        m.setflags(write=False)
        object.__setattr__(self, "free", m)


def _shifted_all(c0: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """out[i, j] = all(c0[i + di, j + dj]) over offsets; out of range counts
    as not free."""
    nx, ny = c0.shape
    out = np.ones_like(c0)
    for di, dj in offsets:
        src_x = slice(max(0, di), min(nx, nx + di))
        dst_x = slice(max(0, -di), min(nx, nx - di))
        src_y = slice(max(0, dj), min(ny, ny + dj))
        dst_y = slice(max(0, -dj), min(ny, ny - dj))
        shifted = np.zeros_like(c0)
        if src_x.start < src_x.stop and src_y.start < src_y.stop:
            shifted[dst_x, dst_y] = c0[src_x, src_y]
        out &= shifted
    return out


# Rasterizing the footprint is pure geometry, so the per-heading offset
# tables are memoized on (footprint vertices, resolution, binning).
_OFFSET_CACHE: dict = {}


def _footprint_tables(footprint: RobotFootprint, res: float, n_theta: int,
                      period: float):
    key = (footprint.body_points.tobytes(), float(res), int(n_theta), float(period))
    hit = _OFFSET_CACHE.get(key)
    if hit is None:
        cover = footprint.coverage_points(0.5 * res)
        origin_dist = float(np.hypot(cover[:, 0], cover[:, 1]).min())
        span = cover.max(axis=0) - cover.min(axis=0)
        offsets = [footprint.cell_offsets(k * period / n_theta, res)
                   for k in range(n_theta)]
        if len(_OFFSET_CACHE) >= 64:
            _OFFSET_CACHE.clear()
        hit = _OFFSET_CACHE[key] = (origin_dist, span, offsets)
    return hit


def erode_free_space(m_hat: ScalarGrid2D, footprint: RobotFootprint,
                     n_theta: int) -> FreeSpaceMasks:
    """Pontryagin difference of the mapped free space with the rotated
    footprint, one layer per heading bin. Grid border cells are treated as
    occupied so the robot can never be placed touching the edge of the
    known world."""
    spec = m_hat.spec
    if n_theta < 1:
        raise ValueError("n_theta must be >= 1")
    res = spec.resolution
    period = spec.theta_period
    origin_dist, span, offsets = _footprint_tables(footprint, res, n_theta, period)
    if origin_dist > res:
        raise ValueError("footprint does not cover the body origin")
    if span[0] >= spec.nx * res or span[1] >= spec.ny * res:
        raise ValueError("footprint larger than the grid")

    c0 = m_hat.values == 0.0
    c0[0, :] = c0[-1, :] = False
    c0[:, 0] = c0[:, -1] = False

    layers = np.empty((n_theta, spec.nx, spec.ny), dtype=bool)
    for k in range(n_theta):
        layers[k] = _shifted_all(c0, offsets[k])
    out_spec = GridSpec(spec.origin_x, spec.origin_y, spec.resolution,
                        spec.nx, spec.ny, n_theta=n_theta, theta_period=period)
    return FreeSpaceMasks(out_spec, layers)


@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    max_residual: float
    empty_layers: tuple

    @property
    def any_empty(self) -> bool:
        return len(self.empty_layers) > 0


def solve_psf(masks: FreeSpaceMasks, cfg: PoissonConfig, timestamp: float,
              warm: Optional[PsfStack] = None):
    """Solve every layer to the residual tolerance.

    Returns (PsfStack, SolveInfo). Layers with an empty free set come back
    all zero and are listed in SolveInfo.empty_layers. Raises SolverError if
    the sweep budget runs out before the residual target.

    Layers are independent, so duplicate free masks (a symmetric footprint
    repeats its rasterization every half turn) are solved once and fanned
    back out.
    """
    spec = masks.spec
    free = masks.free
    L, nx, ny = free.shape
    res = spec.resolution
    res2 = res * res
    res2f = res2 * cfg.forcing
    omega = cfg.sor_omega

    empty = tuple(int(k) for k in range(L) if not free[k].any())
    if len(empty) == L:
        stack = PsfStack(spec, np.zeros((L, nx, ny)), timestamp)
        return stack, SolveInfo(iterations=0, max_residual=0.0, empty_layers=empty)

    flat = free.reshape(L, -1)
    groups: dict = {}
    first_idx = []
    inverse = np.empty(L, dtype=np.intp)
    for k in range(L):
        key = flat[k].tobytes()
        pos = groups.get(key)
        if pos is None:
            pos = len(first_idx)
            groups[key] = pos
            first_idx.append(k)
        inverse[k] = pos
    first_idx = np.asarray(first_idx)
    ufree = free[first_idx]

    # Checkerboard-compact storage: the padded grid splits into a red and a
    # black array, row r of each holding that row's cells of one color at
    # consecutive slots. Every 5-point neighbor of a red cell is black and
    # vice versa, so a half-sweep reads one array and writes the other with
    # unit-stride slices and touches half the cells a masked full-array
    # update would. Cell arithmetic is unchanged.
    P2 = ny + 2 + ((ny + 2) % 2)    # even padded width; any extra column stays 0
    HB = P2 // 2

    def split(pad):
        r = np.empty((pad.shape[0], nx + 2, HB))
        bl = np.empty_like(r)
        r[:, 0::2] = pad[:, 0::2, 0::2]
        r[:, 1::2] = pad[:, 1::2, 1::2]
        bl[:, 0::2] = pad[:, 0::2, 1::2]
        bl[:, 1::2] = pad[:, 1::2, 0::2]
        return r, bl

    def merge(r, bl):
        pad = np.zeros((r.shape[0], nx + 2, P2))
        pad[:, 0::2, 0::2] = r[:, 0::2]
        pad[:, 1::2, 1::2] = r[:, 1::2]
        pad[:, 0::2, 1::2] = bl[:, 0::2]
        pad[:, 1::2, 0::2] = bl[:, 1::2]
        return pad

    hp0 = np.zeros((len(ufree), nx + 2, P2))
    if warm is not None and cfg.warm_start:
        if warm.values.shape == (L, nx, ny) and warm.spec.same_geometry(spec):
            hp0[:, 1:nx + 1, 1:ny + 1] = np.where(ufree, warm.values[first_idx], 0.0)
    red, black = split(hp0)
    wpad = np.zeros_like(hp0)
    wpad[:, 1:nx + 1, 1:ny + 1] = omega * ufree
    wred, wblack = split(wpad)

    # Interior slab slices: odd/even padded rows with the B-ranges of odd/even
    # interior columns, and the shifted ranges for left/right neighbors.
    RO, RE = slice(1, nx + 1, 2), slice(2, nx + 1, 2)
    RO_up, RO_dn = slice(0, nx, 2), slice(2, nx + 2, 2)
    RE_up, RE_dn = slice(1, nx, 2), slice(3, nx + 2, 2)
    BJo = slice(0, (ny + 1) // 2)
    BJo_r = slice(1, (ny + 1) // 2 + 1)
    BJe = slice(1, ny // 2 + 1)
    BJe_l = slice(0, ny // 2)

    def build_slabs(red, black, wred, wblack):
        # (center, up, down, left, right, weight, scratch) per slab; red
        # cells sit at odd columns of odd rows and even columns of even rows.
        specs = [
            (red, black, wred, RO, RO_up, RO_dn, (RO, BJo), (RO, BJo_r), BJo),
            (red, black, wred, RE, RE_up, RE_dn, (RE, BJe_l), (RE, BJe), BJe),
            (black, red, wblack, RO, RO_up, RO_dn, (RO, BJe_l), (RO, BJe), BJe),
            (black, red, wblack, RE, RE_up, RE_dn, (RE, BJo), (RE, BJo_r), BJo),
        ]
        out = []
        for tgt, nbr, warr, rows, up, dn, lf, rt, bcols in specs:
            c = tgt[:, rows, bcols]
            out.append((c, nbr[:, up, bcols], nbr[:, dn, bcols],
                        nbr[:, lf[0], lf[1]], nbr[:, rt[0], rt[1]],
                        warr[:, rows, bcols], np.empty_like(c)))
        return out

    slabs = build_slabs(red, black, wred, wblack)
    final = np.zeros((len(ufree), nx, ny))
    active = np.arange(len(ufree))

    # Layers converge at different rates; a layer that meets the residual
    # target leaves the batch and its field freezes there.
    check_every = 8
    iterations = 0
    max_res = 0.0
    for it in range(cfg.max_iters):
        for c, up, dn, lf, rt, w, buf in slabs:
            # in-place form of: c += w * (0.25 * (nb - res2f) - c)
            np.add(up, dn, out=buf)
            buf += lf
            buf += rt
            buf -= res2f
            buf *= 0.25
            buf -= c
            buf *= w
            c += buf
        iterations = it + 1
        if iterations % check_every == 0 or iterations == cfg.max_iters:
            res_layer = np.zeros(len(active))
            for c, up, dn, lf, rt, w, buf in slabs:
                np.add(up, dn, out=buf)
                buf += lf
                buf += rt
                buf -= 4.0 * c
                buf /= res2
                buf -= cfg.forcing
                slab_res = np.abs(np.where(w > 0.0, buf, 0.0))
                np.maximum(res_layer,
                           slab_res.reshape(len(active), -1).max(axis=1),
                           out=res_layer)
            done = res_layer < cfg.tol
            if done.any():
                max_res = max(max_res, float(res_layer[done].max()))
                pad = merge(red[done], black[done])
                final[active[done]] = pad[:, 1:nx + 1, 1:ny + 1]
                if done.all():
                    break
                keep = ~done
                active = active[keep]
                red, black = red[keep], black[keep]
                wred, wblack = wred[keep], wblack[keep]
                slabs = build_slabs(red, black, wred, wblack)
    else:
        max_res = float(res_layer[~done].max())
        raise SolverError(
            f"SOR did not reach tol={cfg.tol} in {cfg.max_iters} sweeps "
            f"(residual {max_res:.3e})", residual=max_res)

    h = np.where(ufree, final, 0.0)[inverse]
    stack = PsfStack(spec, h, timestamp)
    return stack, SolveInfo(iterations=iterations, max_residual=max_res,
                            empty_layers=empty)


@dataclass(frozen=True)
class PsfSnapshot:
    """The filters' view of the safety function in time: the latest solve
    plus the previous one, extrapolated linearly ahead of the data,

        h(q, t) = h0(q) + (h0(q) - h_prev(q)) / (t0 - t_prev) * (t - t0).

    With no previous solve the field is held constant.
    """

    h_curr: PsfStack
    h_prev: Optional[PsfStack] = None

    def __post_init__(self):
        if self.h_prev is not None:
            if not self.h_prev.spec.same_geometry(self.h_curr.spec):
                raise ValueError("snapshot stacks use different grids")
            if self.h_curr.timestamp <= self.h_prev.timestamp:
                raise ValueError("h_curr must be newer than h_prev")

    @property
    def spec(self) -> GridSpec:
        return self.h_curr.spec

    def _blend(self, t: float) -> float:
        """Weight s with h(t) = (1+s) h0 - s h_prev."""
        if self.h_prev is None:
            return 0.0
        return (t - self.h_curr.timestamp) / (self.h_curr.timestamp - self.h_prev.timestamp)

    def value(self, q, t: float) -> float:
        s = self._blend(t)
        v0 = sample_trilinear(self.h_curr, q)
        if s == 0.0:
            return v0
        return (1.0 + s) * v0 - s * sample_trilinear(self.h_prev, q)

    def time_slope(self, q, t: float = 0.0) -> float:
        """dh/dt at q; constant in t for a linear extrapolation."""
        if self.h_prev is None:
            return 0.0
        dt = self.h_curr.timestamp - self.h_prev.timestamp
        return (sample_trilinear(self.h_curr, q) - sample_trilinear(self.h_prev, q)) / dt

    def gradient(self, q, t: float) -> FieldGradient:
        g0 = gradient_xy(self.h_curr, q)
        s = self._blend(t)
        if s == 0.0:
            return g0
        g1 = gradient_xy(self.h_prev, q)
        w0, w1 = 1.0 + s, -s
        return FieldGradient(w0 * g0.dx + w1 * g1.dx,
                             w0 * g0.dy + w1 * g1.dy,
                             w0 * g0.dtheta + w1 * g1.dtheta,
                             g0.one_sided or g1.one_sided)

    def evaluate_many(self, qs: np.ndarray, ts: np.ndarray):
        """Vectorized value/gradient over a state sequence, stopping at the
        first state off the grid: entries from the first failure on stay
        nan / zero with ok False, exactly like a sequential scan that
        breaks on the first DomainError."""
        qs = np.asarray(qs, dtype=float)
        ts = np.asarray(ts, dtype=float)
        v0, g0, val_ok, grad_ok = value_gradient_many(self.h_curr, qs)
        if self.h_prev is None:
            vals, grads = v0, g0
        else:
            s = ((ts - self.h_curr.timestamp)
                 / (self.h_curr.timestamp - self.h_prev.timestamp))
            v1, g1, _, _ = value_gradient_many(self.h_prev, qs)
            w0, w1 = 1.0 + s, -s
            vals = np.where(s == 0.0, v0, w0 * v0 + w1 * v1)
            grads = np.where((s == 0.0)[:, None], g0,
                             w0[:, None] * g0 + w1[:, None] * g1)
        return _sequential_stop(vals, grads, val_ok, grad_ok)


def _sequential_stop(vals, grads, val_ok, grad_ok):
    """Mask batch results to what a row-by-row scan breaking on the first
    failure would have produced (the scan records a row's value before its
    gradient can fail, hence the val_ok check at the stop row)."""
    ok = val_ok & grad_ok
    alive = np.logical_and.accumulate(ok)
    if alive.all():
        return vals, grads, alive
    stop = int(alive.sum())
    n = len(vals)
    out_v = np.full(n, np.nan)
    out_g = np.zeros((n, 3))
    out_v[:stop] = vals[:stop]
    out_g[:stop] = grads[:stop]
    if val_ok[stop]:
        out_v[stop] = vals[stop]
    return out_v, out_g, alive


def extrapolate_h(snap: PsfSnapshot, q, t: float) -> float:
    return snap.value(q, t)


def h_time_derivative(snap: PsfSnapshot, q) -> float:
    return snap.time_slope(q)


class ScheduledField:
    """A known timeline of safety stacks, linearly interpolated in time and
    held constant outside the covered span. Used for clairvoyant planning
    where the future field is available exactly at the plan's knot times."""

    def __init__(self, stacks: Sequence[PsfStack]):
        if not stacks:
            raise ValueError("need at least one stack")
        times = [s.timestamp for s in stacks]
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValueError("stack timestamps must strictly increase")
        spec = stacks[0].spec
        if any(not s.spec.same_geometry(spec) for s in stacks):
            raise ValueError("stacks use different grids")
        self.stacks = list(stacks)
        self.times = times

    @property
    def spec(self) -> GridSpec:
        return self.stacks[0].spec

    def _segment(self, t: float):
        """(index, weight, slope_dt): stacks[i], stacks[i+1] blended by w."""
        if len(self.stacks) == 1 or t <= self.times[0]:
            return 0, 0.0, None
        if t >= self.times[-1]:
            return len(self.stacks) - 1, 0.0, None
        i = bisect.bisect_right(self.times, t) - 1
        dt = self.times[i + 1] - self.times[i]
        return i, (t - self.times[i]) / dt, dt

    def value(self, q, t: float) -> float:
        i, w, _ = self._segment(t)
        v = sample_trilinear(self.stacks[i], q)
        if w == 0.0:
            return v
        return (1.0 - w) * v + w * sample_trilinear(self.stacks[i + 1], q)

    def time_slope(self, q, t: float) -> float:
        i, _, dt = self._segment(t)
        if dt is None:
            return 0.0
        return (sample_trilinear(self.stacks[i + 1], q)
                - sample_trilinear(self.stacks[i], q)) / dt

    def gradient(self, q, t: float) -> FieldGradient:
        i, w, _ = self._segment(t)
        g0 = gradient_xy(self.stacks[i], q)
        if w == 0.0:
            return g0
        g1 = gradient_xy(self.stacks[i + 1], q)
        return FieldGradient((1 - w) * g0.dx + w * g1.dx,
                             (1 - w) * g0.dy + w * g1.dy,
                             (1 - w) * g0.dtheta + w * g1.dtheta,
                             g0.one_sided or g1.one_sided)

    def evaluate_many(self, qs: np.ndarray, ts: np.ndarray):
        """Batched value/gradient with the same sequential-stop contract as
        PsfSnapshot.evaluate_many, grouping rows by time segment."""
        qs = np.asarray(qs, dtype=float)
        ts = np.asarray(ts, dtype=float)
        n = len(qs)
        vals = np.full(n, np.nan)
        grads = np.zeros((n, 3))
        val_ok = np.zeros(n, dtype=bool)
        grad_ok = np.zeros(n, dtype=bool)
        seg = np.empty(n, dtype=np.intp)
        wseg = np.empty(n)
        for r in range(n):
            seg[r], wseg[r], _ = self._segment(float(ts[r]))
        for i in np.unique(seg):
            rows = np.flatnonzero(seg == i)
            w = wseg[rows]
            v0, g0, vok, gok = value_gradient_many(self.stacks[i], qs[rows])
            if np.any(w != 0.0):
                v1, g1, _, _ = value_gradient_many(self.stacks[i + 1], qs[rows])
                v0 = np.where(w == 0.0, v0, (1 - w) * v0 + w * v1)
                g0 = np.where((w == 0.0)[:, None], g0,
                              (1 - w)[:, None] * g0 + w[:, None] * g1)
            vals[rows] = v0
            grads[rows] = g0
            val_ok[rows] = vok
            grad_ok[rows] = gok
        return _sequential_stop(vals, grads, val_ok, grad_ok)
