"""End-effector lattice over a planar 3R arm with lazily checked edges.

Each lattice point has at most one arm configuration (closed-form IK on a
fixed elbow branch).  An edge (point, action) is feasible when both
endpoints have IK solutions and the straight joint-space interpolation
between them tracks the Cartesian segment and stays collision-free.
Edges are only evaluated when first queried.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from .geometry import Polygon, Pose2, compose, normalize_angle, polygons_intersect, rectangle
from .physics import HandGeometry
from .relmodel import ActionSet

__all__ = [
    "LatticeConfig",
    "LatticePoint",
    "ArmModel",
    "ArmConfig",
    "Trajectory",
    "Environment",
    "EdgeStatus",
    "FeasibilityCache",
    "forward_kinematics",
    "solve_ik",
    "plan_edge",
    "edge_feasible",
    "lattice_stats",
    "reachable_points",
    "load_environment",
]

MAX_SAMPLE_SPACING = 0.005
MAX_DEVIATION = 0.002


@dataclass(frozen=True)
class LatticeConfig:
    dx: float = 0.01
    dy: float = 0.01
    n_theta: int = 1
    origin: Pose2 = Pose2(0.55, 0.0, 0.0)

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("lattice resolution must be positive")
        if self.n_theta < 1:
            raise ValueError("n_theta must be >= 1")

    def pose(self, p: "LatticePoint") -> Pose2:
        return compose(self.origin, Pose2(p[0] * self.dx, p[1] * self.dy, 0.0))


class LatticePoint(NamedTuple):
    ix: int
    iy: int

    def moved(self, step: Tuple[int, int]) -> "LatticePoint":
        return LatticePoint(self.ix + step[0], self.iy + step[1])


class ArmConfig(NamedTuple):
    q1: float
    q2: float
    q3: float


@dataclass(frozen=True)
class ArmModel:
    base: Pose2 = Pose2()
    link_lengths: Tuple[float, float, float] = (0.40, 0.35, 0.25)
    link_widths: Tuple[float, float, float] = (0.06, 0.06, 0.06)
    hand: HandGeometry = field(default_factory=HandGeometry.default)
    table_edge_x: float = -0.05  # no link may extend behind this line (base frame)
    elbow: int = 1  # sign of q2 on the fixed IK branch

    def __post_init__(self):
        if len(self.link_lengths) != 3 or min(self.link_lengths) <= 0:
            raise ValueError("three positive link lengths required")
        if min(self.link_widths) <= 0:
            raise ValueError("link widths must be positive")

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))


@dataclass
class Trajectory:
    start: ArmConfig
    end: ArmConfig
    duration: int = 1

    def at(self, alpha: float) -> ArmConfig:
        return ArmConfig(*(s + alpha * normalize_angle(e - s) for s, e in zip(self.start, self.end)))


@dataclass
class Environment:
    name: str
    obstacles: List[Tuple[str, Polygon]]
    workspace: Tuple[float, float, float, float] = (-0.30, -0.90, 1.40, 0.90)

    def polygons(self) -> List[Polygon]:
        return [p for _, p in self.obstacles]

    def to_dict(self) -> dict:
        x0, y0, x1, y1 = self.workspace
        return {"name": self.name, "workspace": [[x0, y0], [x1, y1]],
                "obstacles": [{"name": n, "vertices": p.vertices.tolist()} for n, p in self.obstacles]}

    @classmethod
    def from_dict(cls, d: dict) -> "Environment":
        (x0, y0), (x1, y1) = d["workspace"]
        return cls(d["name"], [(o["name"], Polygon(o["vertices"])) for o in d.get("obstacles", [])],
                   (float(x0), float(y0), float(x1), float(y1)))


def load_environment(path) -> Environment:
    path = Path(path)
    try:
        with open(path) as fh:
            return Environment.from_dict(json.load(fh))
    except (OSError, ValueError, KeyError) as exc:
        raise ValueError(f"{path}: cannot load environment: {exc}") from exc


# ------------------------------------------------------------------ kinematics


def forward_kinematics(arm: ArmModel, q: Sequence[float]):
    """Joint positions (4 x 2, base to end effector) and the end-effector pose."""
    pts = [arm.base.translation]
    angle = arm.base.theta
    for qi, L in zip(q, arm.link_lengths):
        angle += qi
        p = pts[-1]
        pts.append(p + L * np.array([math.cos(angle), math.sin(angle)]))
    return np.array(pts), Pose2(pts[-1][0], pts[-1][1], angle)


def _link_polygon(a: np.ndarray, b: np.ndarray, width: float) -> Polygon:
    d = b - a
    n = np.array([-d[1], d[0]]) / math.hypot(d[0], d[1]) * (width / 2)
    # n is the left normal of a -> b, so this order is counter-clockwise
    return Polygon._trusted(np.array([a - n, b - n, b + n, a + n]))


def arm_bodies(arm: ArmModel, q: Sequence[float]):
    """Link rectangles and hand footprint polygons (world frame)."""
    pts, ee = forward_kinematics(arm, q)
    links = [_link_polygon(pts[i], pts[i + 1], w) for i, w in enumerate(arm.link_widths)]
    return links, arm.hand.footprint(ee)


def _self_collides(arm: ArmModel, links, hand_polys) -> bool:
    if polygons_intersect(links[0], links[2]):
        return True
    for h in hand_polys:
        if polygons_intersect(links[0], h) or polygons_intersect(links[1], h):
            return True
    # table edge, with the base assumed axis-aligned
    edge = arm.base.x + arm.table_edge_x
    return any(p.vertices[:, 0].min() < edge for p in links[1:])


def solve_ik(arm: ArmModel, target: Pose2) -> Optional[ArmConfig]:
    """Closed-form 3R IK on the fixed elbow branch with the wrist held at
    ``target.theta``; ``None`` when unreachable or self-colliding."""
    L1, L2, L3 = arm.link_lengths
    local = compose(Pose2(-arm.base.x, -arm.base.y, 0.0), target)
    c0, s0 = math.cos(-arm.base.theta), math.sin(-arm.base.theta)
    tx, ty = c0 * local.x - s0 * local.y, s0 * local.x + c0 * local.y
    phi = normalize_angle(target.theta - arm.base.theta)
    wx, wy = tx - L3 * math.cos(phi), ty - L3 * math.sin(phi)
    c2 = (wx * wx + wy * wy - L1 * L1 - L2 * L2) / (2 * L1 * L2)
    if c2 > 1.0 + 1e-12 or c2 < -1.0 - 1e-12:
        return None
    c2 = min(1.0, max(-1.0, c2))
    q2 = arm.elbow * math.acos(c2)
    q1 = math.atan2(wy, wx) - math.atan2(L2 * math.sin(q2), L1 + L2 * math.cos(q2))
    q3 = phi - q1 - q2
    q = ArmConfig(normalize_angle(q1), normalize_angle(q2), normalize_angle(q3))
    links, hand_polys = arm_bodies(arm, q)
    if _self_collides(arm, links, hand_polys):
        return None
    return q


def _in_workspace(poly: Polygon, ws) -> bool:
    lo, hi = poly.bounds
    return lo[0] >= ws[0] and lo[1] >= ws[1] and hi[0] <= ws[2] and hi[1] <= ws[3]


def config_collides(arm: ArmModel, env: Environment, q: Sequence[float]) -> bool:
    links, hand_polys = arm_bodies(arm, q)
    bodies = links + hand_polys
    if not all(_in_workspace(p, env.workspace) for p in bodies):
        return True
    if _self_collides(arm, links, hand_polys):
        return True
    for obs in env.polygons():
        for b in bodies:
            if polygons_intersect(b, obs):
                return True
    return False


def _segment_distance(p, a, b) -> float:
    d = b - a
    t = min(1.0, max(0.0, float(np.dot(p - a, d) / np.dot(d, d))))
    return float(np.linalg.norm(p - (a + t * d)))


def plan_edge(arm: ArmModel, q_start: ArmConfig, q_end: ArmConfig):
    """Sample a straight joint-space trajectory.

    Returns ``(trajectory, configs)`` when the end effector stays within
    the deviation tolerance of the Cartesian segment with sample spacing
    below 5 mm, else ``None``.
    """
    traj = Trajectory(q_start, q_end)
    _, ee0 = forward_kinematics(arm, q_start)
    _, ee1 = forward_kinematics(arm, q_end)
    a, b = ee0.translation, ee1.translation
    n = max(2, int(math.ceil(np.linalg.norm(b - a) / MAX_SAMPLE_SPACING)))
    for _ in range(4):
        configs = [traj.at(k / n) for k in range(n + 1)]
        pts = np.array([forward_kinematics(arm, q)[1].translation for q in configs])
        gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if gaps.max() <= MAX_SAMPLE_SPACING:
            break
        n *= 2
    else:
        return None
    if max(_segment_distance(p, a, b) for p in pts) > MAX_DEVIATION:
        return None
    return traj, configs


class EdgeStatus(IntEnum):
    UNKNOWN = 0
    FEASIBLE = 1
    INFEASIBLE = 2


class FeasibilityCache:
    """Memoised edge feasibility for one (arm, environment, lattice).

    ``status`` maps ``(LatticePoint, action)`` to ``EdgeStatus``; the
    ``grid`` array mirrors it for compiled planner kernels, indexed by
    ``(ix + window, iy + window, action)``.
    """

    def __init__(self, arm: ArmModel, env: Environment, lattice: LatticeConfig,
                 actions: ActionSet, window: int = 150, check_obstacles: bool = True):
        self.arm = arm
        self.env = env
        self.lattice = lattice
        self.actions = actions
        self.window = window
        self.check_obstacles = check_obstacles
        self.status: Dict[Tuple[LatticePoint, int], EdgeStatus] = {}
        self.grid = np.zeros((2 * window + 1, 2 * window + 1, len(actions)), dtype=np.int8)
        self._ik: Dict[LatticePoint, Optional[ArmConfig]] = {}
        self._pose_ok: Dict[LatticePoint, bool] = {}
        self.ik_calls = 0
        self.collision_checks = 0

    def ik(self, p: LatticePoint) -> Optional[ArmConfig]:
        p = LatticePoint(*p)
        if p not in self._ik:
            self.ik_calls += 1
            self._ik[p] = solve_ik(self.arm, self.lattice.pose(p))
        return self._ik[p]

    def _collides(self, q) -> bool:
        self.collision_checks += 1
        if not self.check_obstacles:
            links, hand_polys = arm_bodies(self.arm, q)
            return _self_collides(self.arm, links, hand_polys)
        return config_collides(self.arm, self.env, q)

    def _evaluate(self, p: LatticePoint, a: int) -> bool:
        step = self.actions.steps[a]
        q = p.moved(step)
        lo, hi = (p, q) if (p.ix, p.iy) <= (q.ix, q.iy) else (q, p)
        q_lo, q_hi = self.ik(lo), self.ik(hi)
        if q_lo is None or q_hi is None:
            return False
        planned = plan_edge(self.arm, q_lo, q_hi)
        if planned is None:
            return False
        for c in planned[1]:
            if self._collides(c):
                return False
        return True

    def feasible(self, p, a: int) -> bool:
        p = LatticePoint(*p)
        key = (p, int(a))
        st = self.status.get(key)
        if st is None:
            st = EdgeStatus.FEASIBLE if self._evaluate(p, a) else EdgeStatus.INFEASIBLE
            self.status[key] = st
            w = self.window
            if abs(p.ix) <= w and abs(p.iy) <= w:
                self.grid[p.ix + w, p.iy + w, a] = st
        return st == EdgeStatus.FEASIBLE

    def known(self, p, a: int) -> Optional[bool]:
        st = self.status.get((LatticePoint(*p), int(a)))
        return None if st is None else st == EdgeStatus.FEASIBLE

    def stats(self) -> Tuple[int, int, int]:
        feas = sum(1 for s in self.status.values() if s == EdgeStatus.FEASIBLE)
        return len(self.status), feas, len(self.status) - feas

    def visited_points(self) -> List[LatticePoint]:
        return sorted({p for p, _ in self.status})

    def dump(self, path) -> None:
        """Text dump: one ``ix iy action status`` line per evaluated edge."""
        ev, fe, inf = self.stats()
        with open(path, "w") as fh:
            fh.write(f"# evaluated={ev} feasible={fe} infeasible={inf} "
                     f"ik_calls={self.ik_calls} collision_checks={self.collision_checks}\n")
            for (p, a), st in sorted(self.status.items()):
                fh.write(f"{p.ix} {p.iy} {a} {st.name.lower()}\n")


def edge_feasible(cache: FeasibilityCache, arm: ArmModel, env: Environment, p, a: int) -> bool:
    if cache.arm is not arm or cache.env is not env:
        raise ValueError("cache was built for a different arm or environment")
    return cache.feasible(p, a)


def lattice_stats(cache: FeasibilityCache) -> Tuple[int, int, int]:
    return cache.stats()


def reachable_points(cache: FeasibilityCache, start=(0, 0)) -> Set[LatticePoint]:
    """Every lattice point connected to ``start`` by feasible edges.

    Exhaustive: evaluates all edges out of every reached point, so use it
    for layout checks, not inside the planner.
    """
    start = LatticePoint(*start)
    seen = {start}
    frontier = deque([start])
    while frontier:
        p = frontier.popleft()
        for a, step in enumerate(cache.actions.steps):
            if cache.feasible(p, a):
                q = p.moved(step)
                if q not in seen:
                    seen.add(q)
                    frontier.append(q)
    return seen
