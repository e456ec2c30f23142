"""Quasistatic disc pushing against a rigid planar hand.

The hand translates; whenever the disc penetrates a hand polygon it is
pushed out along the minimal translation vector, plus a small tangential
slip scaled by the sampled pressure offset over friction.  The disc never
moves without contact.  All work happens in the hand frame inside numba
kernels so the discrete model builder can run millions of samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Tuple

import numba as nb
import numpy as np

from .geometry import Polygon, Pose2, rectangle

__all__ = [
    "HandGeometry",
    "PhysicsParams",
    "NoiseSample",
    "ContactReport",
    "PenetrationUnresolvable",
    "sample_noise",
    "sample_noise_batch",
    "step",
    "sense",
    "observation_index",
    "simulate_batch",
]

MAX_RESOLVE_ITERS = 20
SEPARATION_TOL = 1e-9


class PenetrationUnresolvable(RuntimeError):
    """MTV iteration failed to separate the disc from the hand."""


@dataclass(frozen=True)
class HandGeometry:
    palm: Polygon
    finger_left: Polygon
    finger_right: Polygon
    sensor_left: Polygon
    sensor_right: Polygon

    @classmethod
    def default(cls, palm_width=0.08, palm_depth=0.02, finger_length=0.08,
                finger_width=0.005, sensor_length=0.03) -> "HandGeometry":
        """U-shaped hand: palm face on x = 0, fingers along +x.

        The default finger gap (7 cm) leaves 5 mm of play on each side of a
        6 cm disc, comparable to the 1 cm relative cells; a disc seated in
        the palm therefore maps onto whole cells rather than a sub-millimetre
        sliver of one.
        """
        half = palm_width / 2.0
        inner = half - finger_width
        tip = finger_length
        return cls(
            palm=rectangle(-palm_depth, -half, 0.0, half),
            finger_left=rectangle(0.0, inner, tip, half),
            finger_right=rectangle(0.0, -half, tip, -inner),
            sensor_left=rectangle(tip - sensor_length, inner, tip, half),
            sensor_right=rectangle(tip - sensor_length, -half, tip, -inner),
        )

    @property
    def bodies(self) -> Tuple[Polygon, Polygon, Polygon]:
        return (self.palm, self.finger_left, self.finger_right)

    @property
    def sensors(self) -> Tuple[Polygon, Polygon]:
        return (self.sensor_left, self.sensor_right)

    @cached_property
    def packed(self):
        """(verts, normals, nverts) arrays for bodies then sensors."""
        return _pack(list(self.bodies) + list(self.sensors))

    def footprint(self, pose: Pose2):
        return [p.transformed(pose) for p in self.bodies]


def _pack(polys):
    nmax = max(len(p.vertices) for p in polys)
    verts = np.zeros((len(polys), nmax, 2))
    normals = np.zeros((len(polys), nmax, 2))
    nverts = np.zeros(len(polys), dtype=np.int64)
    for i, p in enumerate(polys):
        n = len(p.vertices)
        verts[i, :n] = p.vertices
        normals[i, :n] = p.normals
        nverts[i] = n
    return verts, normals, nverts


@dataclass(frozen=True)
class PhysicsParams:
    mu_mean: float = 0.5
    mu_std: float = 0.1
    slip_gain: float = 1.0
    pressure_std: float = 0.005
    contact_eps: float = 0.001
    substep: float = 0.001
    disc_radius: float = 0.03

    def __post_init__(self):
        if not self.mu_mean > 0:
            raise ValueError("mu_mean must be positive")
        if not self.substep > 0:
            raise ValueError("substep must be positive")
        if self.contact_eps < 0:
            raise ValueError("contact_eps must be non-negative")
        if not self.disc_radius > 0:
            raise ValueError("disc_radius must be positive")


@dataclass(frozen=True)
class NoiseSample:
    mu: float
    pressure_offset: float

    def __post_init__(self):
        object.__setattr__(self, "mu", max(0.01, float(self.mu)))


@dataclass(frozen=True)
class ContactReport:
    left: bool = False
    right: bool = False
    palm: bool = False

    @property
    def observation(self) -> Tuple[int, int]:
        return (int(self.left), int(self.right))


def observation_index(left: bool, right: bool) -> int:
    """Observation (left, right) bits packed as left + 2 * right."""
    return int(bool(left)) + 2 * int(bool(right))


def sample_noise(params: PhysicsParams, rng: np.random.Generator) -> NoiseSample:
    mu = rng.normal(params.mu_mean, params.mu_std)
    offset = rng.normal(0.0, params.pressure_std)
    return NoiseSample(mu, offset)


def sample_noise_batch(params: PhysicsParams, rng: np.random.Generator, n: int):
    mu = np.maximum(rng.normal(params.mu_mean, params.mu_std, n), 0.01)
    offset = rng.normal(0.0, params.pressure_std, n)
    return mu, offset


# --------------------------------------------------------------------------
# numba kernels (hand frame)


@nb.njit(cache=True)
def _signed_distance(cx, cy, verts, normals, n):
    best_plane = -1e300
    inside = True
    for i in range(n):
        pl = (cx - verts[i, 0]) * normals[i, 0] + (cy - verts[i, 1]) * normals[i, 1]
        if pl > 0.0:
            inside = False
        if pl > best_plane:
            best_plane = pl
    if inside:
        return best_plane
    best = 1e300
    for i in range(n):
        j = i + 1 if i + 1 < n else 0
        ex = verts[j, 0] - verts[i, 0]
        ey = verts[j, 1] - verts[i, 1]
        t = ((cx - verts[i, 0]) * ex + (cy - verts[i, 1]) * ey) / (ex * ex + ey * ey)
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        qx = verts[i, 0] + t * ex - cx
        qy = verts[i, 1] + t * ey - cy
        d = math.sqrt(qx * qx + qy * qy)
        if d < best:
            best = d
    return best


@nb.njit(cache=True)
def _penetration(cx, cy, r, verts, normals, n):
    """(depth, nx, ny); depth <= 0 means separated."""
    lox = hix = verts[0, 0]
    loy = hiy = verts[0, 1]
    for i in range(1, n):
        lox = min(lox, verts[i, 0])
        hix = max(hix, verts[i, 0])
        loy = min(loy, verts[i, 1])
        hiy = max(hiy, verts[i, 1])
    if cx - r >= hix or cx + r <= lox or cy - r >= hiy or cy + r <= loy:
        return 0.0, 0.0, 0.0
    best_plane = -1e300
    best_i = 0
    inside = True
    for i in range(n):
        pl = (cx - verts[i, 0]) * normals[i, 0] + (cy - verts[i, 1]) * normals[i, 1]
        if pl > 0.0:
            inside = False
        if pl > best_plane:
            best_plane = pl
            best_i = i
    if inside:
        return r - best_plane, normals[best_i, 0], normals[best_i, 1]
    best = 1e300
    bx = 0.0
    by = 0.0
    bi = 0
    for i in range(n):
        j = i + 1 if i + 1 < n else 0
        ex = verts[j, 0] - verts[i, 0]
        ey = verts[j, 1] - verts[i, 1]
        t = ((cx - verts[i, 0]) * ex + (cy - verts[i, 1]) * ey) / (ex * ex + ey * ey)
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        qx = verts[i, 0] + t * ex
        qy = verts[i, 1] + t * ey
        d = math.sqrt((cx - qx) ** 2 + (cy - qy) ** 2)
        if d < best:
            best = d
            bx = qx
            by = qy
            bi = i
    if best >= r:
        return 0.0, 0.0, 0.0
    if best < 1e-12:
        # center on the boundary: fall back to the face normal
        return r - best, normals[bi, 0], normals[bi, 1]
    return r - best, (cx - bx) / best, (cy - by) / best


@nb.njit(cache=True)
def _resolve(cx, cy, r, slip_ratio, verts, normals, nverts, n_bodies, with_slip):
    """Push the disc out of all bodies. Returns (cx, cy, touched, ok)."""
    touched = False
    slipped = not with_slip
    for _ in range(MAX_RESOLVE_ITERS):
        worst = 0.0
        wx = 0.0
        wy = 0.0
        for k in range(n_bodies):
            d, nx, ny = _penetration(cx, cy, r, verts[k], normals[k], nverts[k])
            if d > worst:
                worst = d
                wx = nx
                wy = ny
        if worst <= SEPARATION_TOL:
            return cx, cy, touched, True
        touched = True
        cx += wx * worst
        cy += wy * worst
        if not slipped:
            # tangent oriented away from the palm centerline
            tx = -wy
            ty = wx
            side = 1.0 if cy >= 0.0 else -1.0
            if ty * side < 0.0 or (ty == 0.0 and tx < 0.0):
                tx = -tx
                ty = -ty
            s = slip_ratio * worst
            cx += tx * s
            cy += ty * s
            slipped = True
    worst = 0.0
    for k in range(n_bodies):
        d, nx, ny = _penetration(cx, cy, r, verts[k], normals[k], nverts[k])
        if d > worst:
            worst = d
    return cx, cy, touched, worst <= 1e-6


@nb.njit(cache=True)
def _step_one(cx, cy, dx, dy, mu, offset, r, slip_gain, substep,
              verts, normals, nverts, n_bodies):
    """Move the hand by (dx, dy) in its own frame; returns the new disc
    center (hand frame, after the move), touched flag and status."""
    length = math.sqrt(dx * dx + dy * dy)
    n_sub = int(math.ceil(length / substep - 1e-12))
    if n_sub < 1:
        n_sub = 1
    sx = dx / n_sub
    sy = dy / n_sub
    slip_ratio = slip_gain * offset / mu
    # swept-disc bounding box against the hand bounding box
    reach = r + length
    lox = hix = verts[0, 0, 0]
    loy = hiy = verts[0, 0, 1]
    for k in range(n_bodies):
        for i in range(nverts[k]):
            lox = min(lox, verts[k, i, 0])
            hix = max(hix, verts[k, i, 0])
            loy = min(loy, verts[k, i, 1])
            hiy = max(hiy, verts[k, i, 1])
    if cx - reach > hix or cx + reach < lox or cy - reach > hiy or cy + reach < loy:
        return cx - dx, cy - dy, False, 0
    cx, cy, touched, ok = _resolve(cx, cy, r, 0.0, verts, normals, nverts, n_bodies, False)
    if not ok:
        return cx, cy, touched, 1
    for _ in range(n_sub):
        cx -= sx
        cy -= sy
        cx, cy, t, ok = _resolve(cx, cy, r, slip_ratio, verts, normals, nverts, n_bodies, True)
        touched = touched or t
        if not ok:
            return cx, cy, touched, 1
    return cx, cy, touched, 0


@nb.njit(cache=True)
def _sense_one(cx, cy, r, eps, verts, normals, nverts, first_sensor):
    left = _signed_distance(cx, cy, verts[first_sensor], normals[first_sensor],
                            nverts[first_sensor]) <= r + eps
    right = _signed_distance(cx, cy, verts[first_sensor + 1], normals[first_sensor + 1],
                             nverts[first_sensor + 1]) <= r + eps
    palm = _signed_distance(cx, cy, verts[0], normals[0], nverts[0]) <= r + eps
    return left, right, palm


@nb.njit(cache=True)
def simulate_batch(centers, dx, dy, mus, offsets, r, slip_gain, substep, eps,
                   verts, normals, nverts, n_bodies):
    """Vectorised step over samples (hand frame).

    Returns (new_centers, obs_index, touched, status); status is nonzero
    for samples where separation failed.
    """
    n = centers.shape[0]
    out = np.empty((n, 2))
    obs = np.empty(n, dtype=np.int64)
    touched = np.empty(n, dtype=np.bool_)
    status = np.empty(n, dtype=np.int64)
    for i in range(n):
        cx, cy, t, st = _step_one(centers[i, 0], centers[i, 1], dx, dy, mus[i], offsets[i],
                                  r, slip_gain, substep, verts, normals, nverts, n_bodies)
        left, right, _ = _sense_one(cx, cy, r, eps, verts, normals, nverts, n_bodies)
        out[i, 0] = cx
        out[i, 1] = cy
        obs[i] = (1 if left else 0) + (2 if right else 0)
        touched[i] = t
        status[i] = st
    return out, obs, touched, status


# --------------------------------------------------------------------------
# scalar API


def _hand_frame_delta(hand_pose: Pose2, hand_delta) -> np.ndarray:
    c, s = math.cos(hand_pose.theta), math.sin(hand_pose.theta)
    return np.array([c * hand_delta[0] + s * hand_delta[1], -s * hand_delta[0] + c * hand_delta[1]])


def step(hand_pose: Pose2, hand_delta, obj: Pose2, noise: NoiseSample,
         hand: HandGeometry, params: PhysicsParams):
    """Translate the hand by ``hand_delta`` (world frame) and push the disc.

    Returns ``(new_object_pose, ContactReport)``; the object's orientation
    is carried through unchanged.
    """
    verts, normals, nverts = hand.packed
    c, s = math.cos(hand_pose.theta), math.sin(hand_pose.theta)
    wx, wy = obj.x - hand_pose.x, obj.y - hand_pose.y
    cx, cy = c * wx + s * wy, -s * wx + c * wy
    d = _hand_frame_delta(hand_pose, hand_delta)
    ncx, ncy, touched, status = _step_one(cx, cy, d[0], d[1], noise.mu, noise.pressure_offset,
                                          params.disc_radius, params.slip_gain, params.substep,
                                          verts, normals, nverts, 3)
    if status:
        raise PenetrationUnresolvable(
            f"disc at hand-frame ({cx:.4f}, {cy:.4f}) could not be separated")
    if not touched:
        new_obj = obj
    else:
        hx = hand_pose.x + hand_delta[0]
        hy = hand_pose.y + hand_delta[1]
        new_obj = Pose2(hx + c * ncx - s * ncy, hy + s * ncx + c * ncy, obj.theta)
    left, right, palm = _sense_one(ncx, ncy, params.disc_radius, params.contact_eps,
                                   verts, normals, nverts, 3)
    return new_obj, ContactReport(bool(left), bool(right), bool(palm))


def sense(obj: Pose2, hand_pose: Pose2, hand: HandGeometry, params: PhysicsParams) -> Tuple[int, int]:
    verts, normals, nverts = hand.packed
    c, s = math.cos(hand_pose.theta), math.sin(hand_pose.theta)
    wx, wy = obj.x - hand_pose.x, obj.y - hand_pose.y
    cx, cy = c * wx + s * wy, -s * wx + c * wy
    left, right, _ = _sense_one(cx, cy, params.disc_radius, params.contact_eps,
                                verts, normals, nverts, 3)
    return int(left), int(right)
