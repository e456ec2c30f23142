"""Planar SE(2) poses and convex polygon / disc collision primitives."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Pose2",
    "Polygon",
    "Disc",
    "normalize_angle",
    "compose",
    "invert",
    "disc_polygon_penetration",
    "disc_intersects_polygon",
    "point_polygon_distance",
    "polygons_intersect",
    "rectangle",
]


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    elif wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def transform_point(self, p: Sequence[float]) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]])

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        rot = np.array([[c, -s], [s, c]])
        return pts @ rot.T + self.translation

    def rotate_vector(self, v: Sequence[float]) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return compose(self, other)


def compose(a: Pose2, b: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.theta + b.theta)


def invert(a: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(-c * a.x - s * a.y, s * a.x - c * a.y, -a.theta)


class Polygon:
    """Convex polygon with counter-clockwise vertices.

    Clockwise input is reversed; non-convex or degenerate input raises
    ``ValueError``.
    """

    __slots__ = ("vertices", "_normals", "_lo", "_hi")

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float).reshape(-1, 2)
        if len(v) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        area2 = _signed_area2(v)
        if abs(area2) < 1e-15:
            raise ValueError("degenerate polygon")
        if area2 < 0:
            v = v[::-1].copy()
        edges = _next(v) - v
        nxt = _next(edges)
        cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
        if np.any(cross < -1e-12):
            raise ValueError("polygon must be convex")
        lengths = np.hypot(edges[:, 0], edges[:, 1])
        if np.any(lengths < 1e-15):
            raise ValueError("repeated vertex")
        self._set(v, edges, lengths)

    def _set(self, v, edges, lengths):
        self.vertices = v
        self.vertices.setflags(write=False)
        self._normals = np.column_stack([edges[:, 1], -edges[:, 0]]) / lengths[:, None]
        self._lo = v.min(axis=0)
        self._hi = v.max(axis=0)

    @classmethod
    def _trusted(cls, v: np.ndarray) -> "Polygon":
        """Skip validation for vertices known to be convex and counter-clockwise."""
        p = cls.__new__(cls)
        edges = _next(v) - v
        p._set(v, edges, np.hypot(edges[:, 0], edges[:, 1]))
        return p

    @property
    def normals(self) -> np.ndarray:
        """Outward unit normal of edge i (from vertex i to i+1)."""
        return self._normals

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._lo, self._hi

    def transformed(self, pose: Pose2) -> "Polygon":
        # rigid motions keep a convex counter-clockwise polygon valid
        return Polygon._trusted(pose.transform_points(self.vertices))

    def translated(self, dx: float, dy: float) -> "Polygon":
        return Polygon(self.vertices + np.array([dx, dy]))

    def contains_point(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(np.einsum("ij,ij->i", p - self.vertices, self._normals) <= 0.0))

    def __repr__(self) -> str:
        return f"Polygon({self.vertices.tolist()})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Polygon) and np.array_equal(self.vertices, other.vertices)

    def __hash__(self):
        return hash(self.vertices.tobytes())


def _next(v: np.ndarray) -> np.ndarray:
    """Rows shifted by one, wrapping around (``np.roll(v, -1, axis=0)``)."""
    return np.concatenate((v[1:], v[:1]))


def _signed_area2(v: np.ndarray) -> float:
    w = _next(v)
    return float(np.dot(v[:, 0], w[:, 1]) - np.dot(w[:, 0], v[:, 1]))


def rectangle(x_min: float, y_min: float, x_max: float, y_max: float) -> Polygon:
    return Polygon([[x_min, y_min], [x_max, y_min], [x_max, y_max], [x_min, y_max]])


@dataclass(frozen=True)
class Disc:
    center: Tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("disc radius must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))


def _closest_boundary(p: np.ndarray, poly: Polygon):
    """Closest point on the polygon boundary to ``p`` and its distance."""
    v = poly.vertices
    e = np.roll(v, -1, axis=0) - v
    t = np.einsum("ij,ij->i", p - v, e) / np.einsum("ij,ij->i", e, e)
    t = np.clip(t, 0.0, 1.0)
    q = v + t[:, None] * e
    d = np.hypot(q[:, 0] - p[0], q[:, 1] - p[1])
    i = int(np.argmin(d))
    return q[i], float(d[i]), i


def point_polygon_distance(p, poly: Polygon) -> float:
    """Signed distance: positive outside, negative inside."""
    p = np.asarray(p, dtype=float)
    plane = np.einsum("ij,ij->i", p - poly.vertices, poly.normals)
    if np.all(plane <= 0.0):
        return float(plane.max())
    return _closest_boundary(p, poly)[1]


def disc_polygon_penetration(d: Disc, p: Polygon) -> Optional[Tuple[float, np.ndarray]]:
    """Minimal translation separating a disc from a convex polygon.

    Returns ``None`` when the boundary distance is at least the radius,
    otherwise ``(depth, normal)`` with the normal pointing from the polygon
    toward the disc center.
    """
    c = np.asarray(d.center)
    lo, hi = p.bounds
    if (c[0] - d.radius >= hi[0] or c[0] + d.radius <= lo[0]
            or c[1] - d.radius >= hi[1] or c[1] + d.radius <= lo[1]):
        return None
    plane = np.einsum("ij,ij->i", c - p.vertices, p.normals)
    if np.all(plane <= 0.0):
        # center inside (or on the boundary): exit through the nearest face
        i = int(np.argmax(plane))
        return d.radius - float(plane[i]), p.normals[i].copy()
    q, dist, i = _closest_boundary(c, p)
    if dist >= d.radius:
        return None
    if dist < 1e-12:
        # center on the boundary: the direction c - q is numerically meaningless
        return d.radius - dist, p.normals[i].copy()
    return d.radius - dist, (c - q) / dist


def disc_intersects_polygon(d: Disc, p: Polygon) -> bool:
    """Closed-set intersection test (tangency counts)."""
    return point_polygon_distance(d.center, p) <= d.radius


def polygons_intersect(a: Polygon, b: Polygon) -> bool:
    alo, ahi = a.bounds
    blo, bhi = b.bounds
    if alo[0] > bhi[0] or blo[0] > ahi[0] or alo[1] > bhi[1] or blo[1] > ahi[1]:
        return False
    for axes in (a.normals, b.normals):
        pa = a.vertices @ axes.T
        pb = b.vertices @ axes.T
        if np.any(pa.max(axis=0) < pb.min(axis=0)) or np.any(pb.max(axis=0) < pa.min(axis=0)):
            return False
    return True
