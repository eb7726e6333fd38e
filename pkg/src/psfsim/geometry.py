"""Planar geometry helpers: point-in-polygon, ray casting, polygon coverage
sampling, and exact intersection tests used by the simulator's ground-truth
collision check.

Polygons are (n, 2) float arrays of vertices in order (either winding).
Rays are (origin, unit direction) pairs; intersections return the ray
parameter t >= 0 or None.
"""
from __future__ import annotations

import numpy as np


def polygon_area(poly: np.ndarray) -> float:
    """Signed area (positive for counterclockwise winding)."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def point_in_polygon(poly: np.ndarray, p) -> bool:
    """Even-odd rule. Points exactly on an edge may land on either side;
    callers needing boundary inclusion should test edge distance too."""
    x, y = float(p[0]), float(p[1])
    inside = False
    n = len(poly)
    j = n - 1
    for i in range(n):
        xi, yi = poly[i]
        xj, yj = poly[j]
        if (yi > y) != (yj > y):
            x_cross = xi + (y - yi) * (xj - xi) / (yj - yi)
            if x < x_cross:
                inside = not inside
        j = i
    return inside


def point_segment_distance(p, a, b) -> float:
    p = np.asarray(p, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.hypot(*(p - a)))
    t = np.clip(float((p - a) @ ab) / denom, 0.0, 1.0)
    return float(np.hypot(*(p - (a + t * ab))))


def point_polygon_distance(poly: np.ndarray, p) -> float:
    """Distance from p to the polygon boundary (0 inside is NOT implied;
    combine with point_in_polygon for signed queries)."""
    n = len(poly)
    return min(point_segment_distance(p, poly[i], poly[(i + 1) % n]) for i in range(n))


def circle_polygon_intersect(center, radius: float, poly: np.ndarray) -> bool:
    """Exact disc vs polygon overlap test."""
    if point_in_polygon(poly, center):
        return True
    return point_polygon_distance(poly, center) <= radius


def _project_extent(poly: np.ndarray, axis: np.ndarray):
    d = poly @ axis
    return float(d.min()), float(d.max())


def convex_polygons_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for convex polygons (closed overlap: touching
    counts as intersecting)."""
    for poly in (a, b):
        n = len(poly)
        for i in range(n):
            edge = poly[(i + 1) % n] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            norm = np.hypot(axis[0], axis[1])
            if norm == 0.0:
                continue
            axis = axis / norm
            amin, amax = _project_extent(a, axis)
            bmin, bmax = _project_extent(b, axis)
            if amax < bmin or bmax < amin:
                return False
    return True


def ray_circle(origin, direction, center, radius: float):
    """Smallest t >= 0 with |origin + t*direction - center| = radius, else None."""
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    oc = o - np.asarray(center, dtype=float)
    b = float(oc @ d)
    c = float(oc @ oc) - radius * radius
    disc = b * b - c
    if disc < 0.0:
        return None
    sq = float(np.sqrt(disc))
    t1 = -b - sq
    if t1 >= 0.0:
        return t1
    t2 = -b + sq
    if t2 >= 0.0:
        return t2
    return None


def ray_segment(origin, direction, a, b):
    """Smallest t >= 0 where the ray meets segment [a, b], else None."""
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ab = b - a
    denom = d[0] * (-ab[1]) - d[1] * (-ab[0])
    if abs(denom) < 1e-15:
        return None
    rhs = a - o
    t = (rhs[0] * (-ab[1]) - rhs[1] * (-ab[0])) / denom
    s = (d[0] * rhs[1] - d[1] * rhs[0]) / denom
    if t >= 0.0 and 0.0 <= s <= 1.0:
        return float(t)
    return None


def ray_polygon(origin, direction, poly: np.ndarray):
    """Nearest boundary hit of the ray on a polygon, else None."""
    best = None
    n = len(poly)
    for i in range(n):
        t = ray_segment(origin, direction, poly[i], poly[(i + 1) % n])
        if t is not None and (best is None or t < best):
            best = t
    return best


def segment_points(a, b, spacing: float) -> np.ndarray:
    """Points along [a, b] at most `spacing` apart, endpoints included."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = float(np.hypot(*(b - a)))
    n = max(1, int(np.ceil(length / spacing)))
    ts = np.linspace(0.0, 1.0, n + 1)
    return a[None, :] + ts[:, None] * (b - a)[None, :]


def polygon_coverage_points(poly: np.ndarray, spacing: float) -> np.ndarray:
    """Boundary plus interior samples of a polygon at the given spacing.

    Interior samples come from an axis-aligned lattice clipped by the
    even-odd rule; boundary edges are sampled explicitly so thin or
    lattice-straddling shapes are never lost.
    """
    pts = [segment_points(poly[i], poly[(i + 1) % len(poly)], spacing)
           for i in range(len(poly))]
    xmin, ymin = poly.min(axis=0)
    xmax, ymax = poly.max(axis=0)
    xs = np.arange(xmin, xmax + 0.5 * spacing, spacing)
    ys = np.arange(ymin, ymax + 0.5 * spacing, spacing)
    if len(xs) and len(ys):
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        lattice = np.column_stack([gx.ravel(), gy.ravel()])
        keep = np.array([point_in_polygon(poly, p) for p in lattice], dtype=bool)
        if keep.any():
            pts.append(lattice[keep])
    return np.unique(np.vstack(pts), axis=0)
