"""Episode execution against continuous physics, metrics and result files."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Disc, Pose2, disc_intersects_polygon
from .latmodel import LatModel, LatState, obstacle_grid, step_lat
from .lattice import ArmModel, Environment, FeasibilityCache, LatticeConfig, LatticePoint, load_environment
from .physics import HandGeometry, PenetrationUnresolvable, PhysicsParams, observation_index
from .physics import sample_noise
from .physics import step as physics_step
from .relmodel import (ActionSet, DiscreteModel, GoalSpec, ImpossibleObservation, InitialBeliefSpec,
                       RelGrid, Scenario, belief_update, discretize_initial_belief,
                       load_or_build_model, step_scenario)
from .solvers.despot import DespotConfig, SearchModel
from .solvers.policies import NoFeasibleAction, Policy, RandomPolicy, RelQMDP, make_policy
from .solvers.vi import VISolution, value_iteration

log = logging.getLogger(__name__)

__all__ = ["ExperimentConfig", "Stack", "World", "StepRecord", "EpisodeLog", "Metrics",
           "build_stack", "default_model_cache", "make_world", "run_episode", "replay_in_world", "evaluate",
           "summarize", "write_csv", "write_plot", "check_theorem2", "ENV_NAMES",
           "IMPOSSIBLE_OBS_SMOOTHING"]

ENV_NAMES = ("empty", "right", "left", "complex")
CAUSES = ("horizon", "infeasible", "no-feasible-action", "unmodelled")
IMPOSSIBLE_OBS_SMOOTHING = 1e-6


@dataclass
class ExperimentConfig:
    env: str = "empty"
    policy: str = "lat-despot"
    episodes: int = 200
    horizon: int = 100
    gamma: float = 0.99
    seed: int = 0
    physics: dict = field(default_factory=dict)
    model: dict = field(default_factory=lambda: {"n_samples": 1024, "seed": 0})
    solver: dict = field(default_factory=dict)
    out: Optional[str] = None
    plot: Optional[str] = None
    model_cache: Optional[str] = None
    trace: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls(**json.load(fh))

    def despot(self) -> DespotConfig:
        return DespotConfig.from_dict(self.solver)


@dataclass
class Stack:
    """Everything shared by the worlds of one experiment."""

    params: PhysicsParams
    hand: HandGeometry
    grid: RelGrid
    actions: ActionSet
    goal: GoalSpec
    init: InitialBeliefSpec
    model: DiscreteModel
    vi: VISolution
    arm: ArmModel
    lattice: LatticeConfig
    b0: np.ndarray
    rel_search: SearchModel


def default_model_cache() -> Path:
    """``$LATPUSH_CACHE`` or ``~/.cache/latpush``; built models are keyed by their inputs."""
    return Path(os.environ.get("LATPUSH_CACHE", Path.home() / ".cache" / "latpush"))


def build_stack(cfg: Optional[ExperimentConfig] = None, model: Optional[DiscreteModel] = None) -> Stack:
    cfg = cfg or ExperimentConfig()
    params = PhysicsParams(**cfg.physics)
    hand = HandGeometry.default()
    grid, actions, goal, init = RelGrid(), ActionSet(), GoalSpec(), InitialBeliefSpec()
    if model is None:
        mcfg = {"n_samples": 1024, "seed": 0, **cfg.model}
        model = load_or_build_model(params, hand, grid, actions, goal, mcfg["n_samples"],
                                    mcfg["seed"], cfg.gamma, cfg.model_cache or default_model_cache())
    vi = value_iteration(model)
    return Stack(params, hand, grid, actions, goal, init, model, vi, ArmModel(hand=hand),
                 LatticeConfig(), discretize_initial_belief(init, grid), SearchModel(model, vi))


def environment_path(name: str) -> Path:
    return Path(str(resources.files("latpush") / "data" / "envs" / f"{name}.json"))


@dataclass
class World:
    """Ground truth for episodes: an environment, or the obstacle-free and
    kinematics-free ``rel`` world in which the hand is unconstrained."""

    name: str
    stack: Stack
    env: Optional[Environment]
    window: int = 150
    _collide: Optional[np.ndarray] = None

    @property
    def is_rel(self) -> bool:
        return self.env is None

    @property
    def collide(self) -> np.ndarray:
        if self._collide is None:
            self._collide = obstacle_grid(self.env, self.stack.lattice, self.stack.grid,
                                          self.stack.params.disc_radius, self.window)
        return self._collide

    def new_cache(self) -> Optional[FeasibilityCache]:
        if self.is_rel:
            return None
        return FeasibilityCache(self.stack.arm, self.env, self.stack.lattice, self.stack.actions,
                                self.window)

    def lat_model(self, cache: FeasibilityCache) -> LatModel:
        m = LatModel(self.stack.model, self.stack.arm, self.stack.lattice, self.env, cache,
                     self.stack.params.disc_radius)
        m.__dict__["collide"] = self.collide
        return m

    def search_model(self, cache: FeasibilityCache) -> SearchModel:
        return SearchModel(self.stack.model, self.stack.vi, self.lat_model(cache))

    def object_blocked(self, xy) -> bool:
        if self.is_rel:
            return False
        d = Disc((float(xy[0]), float(xy[1])), self.stack.params.disc_radius)
        return any(disc_intersects_polygon(d, p) for p in self.env.polygons())


def make_world(name: str, stack: Stack, env_file=None) -> World:
    if name == "rel":
        return World("rel", stack, None)
    env = load_environment(env_file or environment_path(name))
    return World(name, stack, env)


@dataclass
class StepRecord:
    t: int
    action: int
    obs: int  # -1 when the step did not execute
    reward: float
    obj: tuple  # world (x, y) of the object after the step
    robot: tuple
    in_goal: bool  # before the step, i.e. the state the reward is charged on
    feasible: bool
    decision_time: float
    root_u: float = float("nan")
    root_l: float = float("nan")
    bounds_ok: bool = True  # root l <= u held after every search trial


@dataclass
class EpisodeLog:
    episode: int
    seed: int
    records: List[StepRecord]
    cause: str
    value: float
    in_goal: np.ndarray  # (horizon + 1,) in-goal flag per timestep, False after termination
    active: np.ndarray  # (horizon + 1,)
    obj0: tuple
    resampled: bool = False
    edges_evaluated: int = 0  # lattice edges whose feasibility was computed
    edges_window: int = 0  # all edges of the bounding box of the points touched


    @property
    def terminated_at(self) -> Optional[int]:
        return None if self.cause == "horizon" else len(self.records) - 1

    @property
    def infeasible_executions(self) -> int:
        return int(self.cause == "infeasible")


def _terminal_value(rewards: Sequence[float], t: int, gamma: float) -> float:
    """sum_{k<t} gamma^k r_k  -  gamma^t / (1 - gamma)."""
    return sum(gamma ** k * r for k, r in enumerate(rewards[:t])) - gamma ** t / (1.0 - gamma)


def _episode_rngs(seed: int):
    init_ss, noise_ss, policy_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(noise_ss),
            int(policy_ss.generate_state(1)[0]))


def _sample_object(world: World, rng: np.random.Generator):
    """True initial object pose; re-drawn while it overlaps an obstacle."""
    st = world.stack
    start = st.lattice.pose((0, 0))
    for k in range(10_000):
        rel = st.init.sample(rng)
        xy = start.transform_point(rel)
        if not world.object_blocked(xy):
            return (float(xy[0]), float(xy[1])), k > 0
    raise RuntimeError("could not place the object clear of obstacles")


def _relative(stack: Stack, robot, xy):
    hp = stack.lattice.pose(robot)
    c, s = math.cos(hp.theta), math.sin(hp.theta)
    wx, wy = xy[0] - hp.x, xy[1] - hp.y
    return c * wx + s * wy, -s * wx + c * wy


def _edge_economy(cache: Optional[FeasibilityCache]) -> Tuple[int, int]:
    """Evaluated edges and the edge count of the bounding box of their sources."""
    if cache is None or not cache.status:
        return 0, 0
    pts = np.array(cache.visited_points())
    w, h = pts.max(axis=0) - pts.min(axis=0) + 1
    return len(cache.status), int(w * h * len(cache.actions))


def _filter(model: DiscreteModel, b, a, o):
    try:
        return belief_update(model, b, a, o)
    except ImpossibleObservation:
        # the continuous world produced an observation the tables rule out;
        # fall back to a slightly smoothed observation likelihood
        pred = model.transition_transposed[a] @ b
        post = pred * (model.omega[a, :, o] + IMPOSSIBLE_OBS_SMOOTHING)
        return post / post.sum()


def run_episode(cfg: ExperimentConfig, policy: Policy, world: World, seed: int,
                episode: int = 0) -> EpisodeLog:
    st = world.stack
    gamma, H = cfg.gamma, cfg.horizon
    rng_init, rng_noise, policy_seed = _episode_rngs(seed)
    obj, resampled = _sample_object(world, rng_init)
    obj0 = obj
    cache = world.new_cache()
    if policy.uses_lattice and cache is None:
        raise ValueError(f"{policy.name} needs a lattice world")
    policy.reset(seed=policy_seed, cache=cache)
    b = st.b0.copy()
    robot = LatticePoint(0, 0)
    records: List[StepRecord] = []
    rewards: List[float] = []
    in_goal = np.zeros(H + 1, dtype=bool)
    active = np.zeros(H + 1, dtype=bool)
    cause = "horizon"
    value = 0.0
    for t in range(H):
        rx, ry = _relative(st, robot, obj)
        goal_now = bool(st.goal.contains(rx, ry))
        in_goal[t], active[t] = goal_now, True
        r = 0.0 if goal_now else -1.0
        t0 = time.perf_counter()
        try:
            a = policy.act(b, robot)
        except NoFeasibleAction:
            records.append(StepRecord(t, -1, -1, -1.0, obj, tuple(robot), goal_now, False,
                                      time.perf_counter() - t0))
            cause = "no-feasible-action"
            break
        dt = time.perf_counter() - t0
        tree = policy.last_tree
        ru, rl = (tree.root_u, tree.root_l) if tree is not None else (float("nan"),) * 2
        ok = tree is None or bool(np.all(tree.trace_l <= tree.trace_u) and rl <= ru)
        if cache is not None and not cache.feasible(robot, a):
            records.append(StepRecord(t, a, -1, -1.0, obj, tuple(robot), goal_now, False, dt, ru, rl, ok))
            cause = "infeasible"
            break
        hand_pose = st.lattice.pose(robot)
        delta = hand_pose.rotate_vector(st.actions.displacement(a))
        noise = sample_noise(st.params, rng_noise)
        try:
            new_obj, report = physics_step(hand_pose, delta, Pose2(obj[0], obj[1]), noise,
                                           st.hand, st.params)
        except PenetrationUnresolvable:
            records.append(StepRecord(t, a, -1, -1.0, obj, tuple(robot), goal_now, True, dt, ru, rl, ok))
            cause = "unmodelled"
            break
        obj = (new_obj.x, new_obj.y)
        robot = robot.moved(st.actions.steps[a])
        o = observation_index(report.left, report.right)
        nx, ny = _relative(st, robot, obj)
        if st.grid.cell_of(nx, ny) == st.grid.out or world.object_blocked(obj):
            records.append(StepRecord(t, a, o, -1.0, obj, tuple(robot), goal_now, True, dt, ru, rl, ok))
            cause = "unmodelled"
            break
        rewards.append(r)
        value += gamma ** t * r
        records.append(StepRecord(t, a, o, r, obj, tuple(robot), goal_now, True, dt, ru, rl, ok))
        b = _filter(st.model, b, a, o)
    if cause == "horizon":
        rx, ry = _relative(st, robot, obj)
        in_goal[H], active[H] = bool(st.goal.contains(rx, ry)), True
    else:
        value = _terminal_value(rewards, len(records) - 1, gamma)
    evaluated, window_edges = _edge_economy(cache)
    return EpisodeLog(episode, seed, records, cause, value, in_goal, active, obj0, resampled,
                      evaluated, window_edges)


def replay_in_world(log_rel: EpisodeLog, cfg: ExperimentConfig, world: World,
                    policy: Policy) -> EpisodeLog:
    """Re-express a rel-world episode of a lattice-blind policy in ``world``.

    The policy never observes the environment, so its actions, the noise
    draws and the object trajectory coincide with the rel-world run until
    the first infeasible edge or obstacle contact.  When the initial object
    pose itself must be re-drawn the episode is simply re-run.
    """
    if policy.uses_lattice:
        raise ValueError("only lattice-blind policies can be replayed")
    st = world.stack
    if world.object_blocked(log_rel.obj0):
        return run_episode(cfg, policy, world, log_rel.seed, log_rel.episode)
    H, gamma = cfg.horizon, cfg.gamma
    cache = world.new_cache()
    records, rewards = [], []
    in_goal = np.zeros(H + 1, dtype=bool)
    active = np.zeros(H + 1, dtype=bool)
    cause = "horizon"
    last = len(log_rel.records) - 1
    for i, rec in enumerate(log_rel.records):
        in_goal[rec.t], active[rec.t] = rec.in_goal, True
        prev_robot = log_rel.records[i - 1].robot if i > 0 else (0, 0)
        prev_obj = log_rel.records[i - 1].obj if i > 0 else log_rel.obj0
        if rec.action >= 0 and not cache.feasible(prev_robot, rec.action):
            records.append(dataclasses.replace(rec, obs=-1, reward=-1.0, feasible=False,
                                               obj=prev_obj, robot=tuple(prev_robot)))
            cause = "infeasible"
            break
        if i == last and log_rel.cause != "horizon":
            records.append(rec)
            cause = log_rel.cause
            break
        if world.object_blocked(rec.obj):
            records.append(dataclasses.replace(rec, reward=-1.0))
            cause = "unmodelled"
            break
        records.append(rec)
        rewards.append(rec.reward)
    if cause == "horizon":
        in_goal[H], active[H] = log_rel.in_goal[H], True
        value = log_rel.value
    else:
        value = _terminal_value(rewards, len(records) - 1, gamma)
    return EpisodeLog(log_rel.episode, log_rel.seed, records, cause, value, in_goal, active,
                      log_rel.obj0, log_rel.resampled)


# --------------------------------------------------------------------- metrics


@dataclass
class Metrics:
    n: int
    value_mean: float
    value_ci95: float  # half-width of the normal-approximation interval
    success: np.ndarray  # (horizon + 1,)
    active: np.ndarray
    causes: Dict[str, int]
    infeasible_executions: int
    decision_time_mean: float
    decision_time_max: float

    @property
    def value_interval(self):
        return self.value_mean - self.value_ci95, self.value_mean + self.value_ci95

    def to_dict(self) -> dict:
        return {"n": self.n, "value_mean": self.value_mean, "value_ci95": self.value_ci95,
                "success_final": float(self.success[-1]), "causes": self.causes,
                "infeasible_executions": self.infeasible_executions,
                "decision_time_mean": self.decision_time_mean,
                "decision_time_max": self.decision_time_max}


def summarize(logs: Sequence[EpisodeLog]) -> Metrics:
    if not logs:
        raise ValueError("no episodes to summarize")
    values = np.array([lg.value for lg in logs])
    n = len(values)
    ci = 1.96 * values.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
    times = [r.decision_time for lg in logs for r in lg.records]
    causes = {c: sum(lg.cause == c for lg in logs) for c in CAUSES}
    return Metrics(n, float(values.mean()), float(ci),
                   np.mean([lg.in_goal for lg in logs], axis=0),
                   np.mean([lg.active for lg in logs], axis=0),
                   causes, sum(lg.infeasible_executions for lg in logs),
                   float(np.mean(times)) if times else 0.0,
                   float(np.max(times)) if times else 0.0)


def write_csv(path, logs: Sequence[EpisodeLog], metrics: Metrics) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "t", "action", "obs", "reward", "in_goal", "feasible", "term_cause"])
            for lg in logs:
                last = len(lg.records) - 1
                for i, r in enumerate(lg.records):
                    cause = lg.cause if i == last else ""
                    w.writerow([lg.episode, r.t, r.action, r.obs, r.reward, int(r.in_goal),
                                int(r.feasible), cause])
            w.writerow(["summary:value_mean", "", "", "", metrics.value_mean, "", "", ""])
            w.writerow(["summary:value_ci95", "", "", "", metrics.value_ci95, "", "", ""])
            w.writerow(["summary:decision_time_mean", "", "", "", metrics.decision_time_mean, "", "", ""])
            for c, k in metrics.causes.items():
                w.writerow([f"summary:cause:{c}", "", "", "", k, "", "", ""])
            for t, (sp, ac) in enumerate(zip(metrics.success, metrics.active)):
                w.writerow(["summary:success", t, "", "", float(sp), "", "", ""])
                w.writerow(["summary:active", t, "", "", float(ac), "", "", ""])
    except OSError as exc:
        raise OSError(f"{path}: cannot write results: {exc}") from exc


def write_plot(path, curves: Dict[str, Metrics]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, m in curves.items():
        t = np.arange(len(m.success))
        ax1.plot(t, m.success, label=label)
        ax2.plot(t, m.active, label=label)
    ax1.set_xlabel("timestep")
    ax1.set_ylabel("P(object in goal)")
    ax2.set_xlabel("timestep")
    ax2.set_ylabel("fraction still active")
    for ax in (ax1, ax2):
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    ax1.legend(fontsize=8)
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg")
    except OSError as exc:
        raise OSError(f"{path}: cannot write plot: {exc}") from exc
    finally:
        plt.close(fig)


def episode_seeds(master: int, n: int) -> List[int]:
    return [int(np.random.SeedSequence([master, i]).generate_state(1)[0]) for i in range(n)]


def evaluate(cfg: ExperimentConfig, stack: Optional[Stack] = None, world: Optional[World] = None,
             progress=None):
    """Run ``cfg.episodes`` episodes; write CSV / SVG when configured."""
    stack = stack or build_stack(cfg)
    world = world or make_world(cfg.env, stack)
    policy = make_policy(cfg.policy, stack.vi, stack.rel_search, world.search_model, cfg.despot())
    logs = []
    for i, seed in enumerate(episode_seeds(cfg.seed, cfg.episodes)):
        logs.append(run_episode(cfg, policy, world, seed, i))
        if progress is not None:
            progress(i, logs[-1])
    metrics = summarize(logs)
    if cfg.out:
        write_csv(cfg.out, logs, metrics)
    if cfg.plot:
        write_plot(cfg.plot, {cfg.policy: metrics})
    return metrics, logs


# ------------------------------------------------------------ scenario check


@dataclass
class Theorem2Report:
    pairs: int
    violations: int
    prefix_mismatches: int
    max_violation: float  # max over pairs of (lat return - rel return)
    invalidated: int

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.prefix_mismatches == 0 and self.max_violation <= 0.0


def check_theorem2(stack: Stack, worlds: Sequence[World], n_pairs: int, horizon: int = 100,
                   seed: int = 0) -> Theorem2Report:
    """Replay identical (action sequence, scenario) pairs through both models."""
    gamma = stack.model.gamma
    rng = np.random.default_rng(seed)
    lat_models = [w.lat_model(w.new_cache()) for w in worlds]
    qmdp, rand = RelQMDP(stack.vi), RandomPolicy(len(stack.actions))
    violations = mismatches = invalidated = 0
    worst = -np.inf
    for k in range(n_pairs):
        lm = lat_models[int(rng.integers(len(lat_models)))]
        use_qmdp = bool(rng.integers(2))
        sc = Scenario.sample(stack.b0, [seed, k])
        rand.reset(seed=[seed, k, 1])
        b = stack.b0.copy()
        s_rel = sc.s0
        s_lat = LatState(LatticePoint(0, 0), lm.invalid if sc.s0 == stack.model.out else sc.s0)
        g_rel = g_lat = 0.0
        first_invalid = -1 if s_lat.obj == lm.invalid else None
        mismatch = False
        for t in range(horizon):
            a = qmdp.act(b, None) if use_qmdp else rand.act(b, None)
            psi = sc.psi(t)
            s_rel, o, r_rel = step_scenario(stack.model, s_rel, a, psi)
            s_lat, _, r_lat = step_lat(lm, s_lat, a, psi)
            if first_invalid is None and s_lat.obj == lm.invalid:
                first_invalid = t
            if first_invalid is None and r_lat != r_rel:
                mismatch = True
            if first_invalid is not None and t > first_invalid and r_lat != -1.0:
                mismatch = True
            g_rel += gamma ** t * r_rel
            g_lat += gamma ** t * r_lat
            if use_qmdp:
                b = _filter(stack.model, b, a, o)
        invalidated += first_invalid is not None
        worst = max(worst, g_lat - g_rel)
        violations += g_lat > g_rel
        mismatches += mismatch
    return Theorem2Report(n_pairs, int(violations), int(mismatches), float(worst), int(invalidated))
