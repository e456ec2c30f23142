"""Configuration-lattice POMDP: relative model composed with arm feasibility.

A state is a lattice point plus a relative object cell, or the absorbing
INVALID state reached by infeasible actions and un-modelled contact.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Optional, Tuple

import numpy as np

from .geometry import Disc, Pose2, compose, disc_intersects_polygon, invert
from .lattice import ArmModel, Environment, FeasibilityCache, LatticeConfig, LatticePoint
from .relmodel import N_OBS, DiscreteModel, RelGrid, step_scenario

__all__ = ["LatState", "LatModel", "step_lat", "object_world_pose", "obstacle_grid"]


class LatState(NamedTuple):
    robot: Optional[LatticePoint]
    obj: int  # relative cell, OUT, or LatModel.invalid


def object_world_pose(robot, cell: int, lattice_cfg: LatticeConfig, grid: RelGrid) -> Pose2:
    """World pose of the object disc for a lattice point and relative cell."""
    if cell < 0 or cell >= grid.n_cells:
        raise ValueError("cell must be an in-grid relative cell (not OUT)")
    cx, cy = grid.center(cell)
    return compose(lattice_cfg.pose(robot), Pose2(cx, cy, 0.0))


def obstacle_grid(env: Environment, lattice_cfg: LatticeConfig, grid: RelGrid,
                  radius: float, window: int) -> np.ndarray:
    """Object-obstacle collision flags on the combined (robot + cell) index grid.

    Entry ``[ix + i + window, iy + j + window]`` is true when the disc
    centred at the cell (i, j) centre, seen from lattice point (ix, iy),
    touches an obstacle (tangency counts).
    """
    if not (np.isclose(lattice_cfg.dx, grid.resolution) and np.isclose(lattice_cfg.dy, grid.resolution)):
        raise ValueError("lattice and relative grid must share the resolution")
    gx = np.arange(-window, window + grid.nx)
    gy = np.arange(-window, window + grid.ny)
    cx0, cy0 = grid.center(grid.index(0, 0))
    X, Y = np.meshgrid(cx0 + gx * grid.resolution, cy0 + gy * grid.resolution, indexing="ij")
    pts = lattice_cfg.origin.transform_points(np.column_stack([X.ravel(), Y.ravel()]))
    hit = np.zeros(len(pts), dtype=bool)
    for _, poly in env.obstacles:
        v = poly.vertices
        rel = pts[:, None, :] - v[None]
        inside = np.all(np.einsum("kij,ij->ki", rel, poly.normals) <= 0.0, axis=1)
        e = np.roll(v, -1, axis=0) - v
        t = np.einsum("kij,ij->ki", rel, e) / np.einsum("ij,ij->i", e, e)
        t = np.clip(t, 0.0, 1.0)
        q = v[None] + t[..., None] * e[None]
        dist = np.min(np.linalg.norm(pts[:, None, :] - q, axis=2), axis=1)
        hit |= inside | (dist <= radius)
    return hit.reshape(X.shape)


@dataclass
class LatModel:
    rel: DiscreteModel
    arm: ArmModel
    lattice: LatticeConfig
    env: Environment
    cache: FeasibilityCache
    radius: float = 0.03

    def __post_init__(self):
        if self.cache.actions.steps != self.rel.actions.steps:
            raise ValueError("lattice and relative model must share the action set")
        if not np.isclose(self.lattice.dx, self.rel.grid.resolution):
            raise ValueError("lattice and relative model must share the resolution")

    @property
    def gamma(self) -> float:
        return self.rel.gamma

    @property
    def invalid(self) -> int:
        return self.rel.n_states

    @cached_property
    def collide(self) -> np.ndarray:
        return obstacle_grid(self.env, self.lattice, self.rel.grid, self.radius, self.cache.window)

    def object_collides(self, robot, cell: int) -> bool:
        ix, iy = self.rel.grid.unravel(cell)
        w = self.cache.window
        i, j = robot[0] + ix + w, robot[1] + iy + w
        if 0 <= i < self.collide.shape[0] and 0 <= j < self.collide.shape[1]:
            return bool(self.collide[i, j])
        center = object_world_pose(robot, cell, self.lattice, self.rel.grid)
        d = Disc((center.x, center.y), self.radius)
        return any(disc_intersects_polygon(d, p) for p in self.env.polygons())

    def relative_pose(self, robot, world_xy) -> Tuple[float, float]:
        p = compose(invert(self.lattice.pose(robot)), Pose2(world_xy[0], world_xy[1], 0.0))
        return p.x, p.y


def step_lat(m: LatModel, s: LatState, a: int, psi_t) -> Tuple[LatState, int, float]:
    u2 = float(psi_t[1])
    uniform_o = min(int(u2 * N_OBS), N_OBS - 1)
    bad = LatState(None, m.invalid)
    if s.obj == m.invalid:
        return bad, uniform_o, -1.0
    if not m.cache.feasible(s.robot, a):
        return bad, uniform_o, -1.0
    s_next, o, r = step_scenario(m.rel, s.obj, a, psi_t)
    robot = LatticePoint(*s.robot).moved(m.rel.actions.steps[a])
    if s_next == m.rel.out or m.object_collides(robot, s_next):
        return bad, o, -1.0
    return LatState(robot, s_next), o, r
