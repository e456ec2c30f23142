"""Determinized sparse tree search over the relative or lattice model.

The search itself runs in compiled kernels (``kernels.py``); this module
owns configuration, scenario sampling, the lazy-edge resume loop and the
regularized action extraction.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from ..latmodel import LatModel
from ..relmodel import DiscreteModel
from . import kernels as K
from .vi import VISolution

__all__ = ["DespotConfig", "SearchModel", "DespotNode", "DespotTree", "despot_search",
           "despot_act", "rollout_lower_bound"]


@dataclass(frozen=True)
class DespotConfig:
    k_scenarios: int = 128
    max_trials: int = 512
    max_depth: int = 60
    lam: float = 0.01
    epsilon_gap: float = 0.01
    rollout_count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.k_scenarios < 1 or self.max_trials < 1 or self.max_depth < 1 or self.rollout_count < 1:
            raise ValueError("k_scenarios, max_trials, max_depth and rollout_count must be positive")
        if self.lam < 0 or self.epsilon_gap < 0:
            raise ValueError("lam and epsilon_gap must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "DespotConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


def deterministic_tables(rel: DiscreteModel):
    """Single-successor rows and one-hot observation rows, else -1.

    Both tables are padded with one extra state so they can be indexed by
    the invalid state of a lattice model.
    """
    A, S = rel.n_actions, rel.n_states
    det_next = np.full((A, S + 1), -1, np.int64)
    det_obs = np.full((A, S + 1), -1, np.int64)
    width = np.diff(rel.indptr, axis=1)
    for a in range(A):
        single = np.flatnonzero(width[a] == 1)
        det_next[a, single] = rel.indices[rel.indptr[a, single]]
        one_hot = np.flatnonzero(rel.omega[a].max(axis=1) == 1.0)
        det_obs[a, one_hot] = rel.omega[a, one_hot].argmax(axis=1)
    return det_next, det_obs


class SearchModel:
    """Array bundle consumed by the kernels.

    Built either from a relative model alone (``lat=None``) or together
    with a lattice model, in which case the search reads the lattice
    cache's status grid and stops to evaluate unknown edges.
    """

    def __init__(self, rel: DiscreteModel, vi: VISolution, lat: Optional[LatModel] = None):
        self.rel = rel
        self.vi = vi
        self.lat = lat
        self.gamma = float(rel.gamma)
        self.indptr = np.ascontiguousarray(rel.indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(rel.indices, dtype=np.int64)
        self.cum = np.ascontiguousarray(rel.cum, dtype=np.float64)
        self.omega_cum = np.ascontiguousarray(rel.omega_cum, dtype=np.float64)
        self.invalid = rel.n_states
        self.out = rel.out
        tail = -1.0 / (1.0 - self.gamma)
        self.reward = np.append(rel.reward, -1.0).astype(np.float64)
        self.Vext = np.append(vi.V, tail).astype(np.float64)
        self.Q = np.ascontiguousarray(vi.Q, dtype=np.float64)
        self.steps = np.array(rel.actions.steps, dtype=np.int64)
        self.det_next, self.det_obs = deterministic_tables(rel)
        self.ny = rel.grid.ny
        if lat is None:
            self.collide = np.zeros((1, 1), dtype=np.bool_)
            self.feas = np.zeros((1, 1, 1), dtype=np.int8)
            self.window = 0
        else:
            self.collide = np.ascontiguousarray(lat.collide)
            self.feas = lat.cache.grid
            self.window = lat.cache.window

    @property
    def is_lat(self) -> bool:
        return self.lat is not None

    @property
    def n_actions(self) -> int:
        return len(self.steps)

    def resolve(self, ix: int, iy: int, a: int) -> None:
        self.lat.cache.feasible((int(ix), int(iy)), int(a))

    def root_states(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64).copy()
        if self.is_lat:
            states[states == self.out] = self.invalid
        return states


@dataclass
class DespotNode:
    index: int
    depth: int
    scenario_ids: np.ndarray
    states: np.ndarray
    robot: Tuple[int, int]
    u: float
    l: float
    l_default: float
    children: dict  # (action, observation) -> node index


@dataclass
class DespotTree:
    action: int
    root_u: float
    root_l: float
    trials: int
    n_nodes: int
    trace_u: np.ndarray
    trace_l: np.ndarray
    action_lower: np.ndarray
    action_upper: np.ndarray
    action_size: np.ndarray
    elapsed: float
    edge_queries: int
    _arrays: dict = field(repr=False, default_factory=dict)

    def node(self, i: int) -> DespotNode:
        ar = self._arrays
        s0, n = ar["start"][i], ar["count"][i]
        children = {}
        if ar["expanded"][i]:
            for a in range(ar["e_child"].shape[1]):
                for o in range(4):
                    c = ar["e_child"][i, a, o]
                    if c >= 0:
                        children[(a, o)] = int(c)
        return DespotNode(i, int(ar["depth"][i]), ar["pool_ids"][s0:s0 + n].copy(),
                          ar["pool_states"][s0:s0 + n].copy(), (int(ar["rx"][i]), int(ar["ry"][i])),
                          float(ar["u"][i]), float(ar["l"][i]), float(ar["ldef"][i]), children)


def _resume(model: SearchModel, fn, need_of):
    """Call ``fn`` until it stops asking for lattice edges."""
    queries = 0
    while True:
        status = fn()
        if status == K.DONE:
            return queries
        if not model.is_lat:
            raise RuntimeError("relative search requested a lattice edge")
        model.resolve(*need_of())
        queries += 1


def rollout_lower_bound(model: SearchModel, states: Sequence[int], scenario_ids: Sequence[int],
                        psi: np.ndarray, t0: int, max_depth: int, robot=(0, 0)) -> float:
    """Mean discounted rollout return over the given scenarios from depth ``t0``."""
    states = model.root_states(states)
    ids = np.asarray(scenario_ids, dtype=np.int64)
    need = np.zeros(3, np.int64)
    out = {}

    def call():
        st, v = K.rollout(states, ids, t0, max_depth, int(robot[0]), int(robot[1]), psi, model.gamma,
                          model.is_lat, model.indptr, model.indices, model.cum, model.omega_cum,
                          model.det_next, model.det_obs, model.reward, model.Q,
                          model.steps, model.ny, model.out, model.invalid, model.collide, model.feas,
                          model.window, need)
        out["v"] = v
        return st

    _resume(model, call, lambda: need)
    return float(out["v"])


def sample_scenarios(b0: np.ndarray, k: int, max_depth: int, rng: np.random.Generator):
    """Inverse-CDF root states and a fresh uniform stream per scenario."""
    u = rng.random(k)
    c = np.cumsum(b0)
    states = np.minimum(np.searchsorted(c, u * c[-1], side="right"), len(b0) - 1)
    psi = rng.random((k, max_depth, 2))
    return states.astype(np.int64), psi


def despot_search(model: SearchModel, root_states: np.ndarray, psi: np.ndarray, cfg: DespotConfig,
                  robot=(0, 0)) -> DespotTree:
    """Grow a search tree from explicit root scenarios and extract an action."""
    t_start = time.perf_counter()
    k = len(root_states)
    A = model.n_actions
    cap = cfg.max_trials * A * 4 + 1
    pool_cap = k * (cfg.max_trials * A + 1)
    ar = dict(
        depth=np.zeros(cap, np.int64), rx=np.zeros(cap, np.int64), ry=np.zeros(cap, np.int64),
        u=np.zeros(cap), l=np.zeros(cap), ldef=np.zeros(cap), expanded=np.zeros(cap, np.bool_),
        start=np.zeros(cap, np.int64), count=np.zeros(cap, np.int64),
        e_r=np.zeros((cap, A)), e_u=np.zeros((cap, A)), e_l=np.zeros((cap, A)),
        e_child=np.full((cap, A, 4), -1, np.int64),
        pool_ids=np.zeros(pool_cap, np.int64), pool_states=np.zeros(pool_cap, np.int64),
    )
    meta = np.zeros(K.N_META, np.int64)
    states = model.root_states(root_states)
    ar["pool_ids"][:k] = np.arange(k)
    ar["pool_states"][:k] = states
    ar["count"][0] = k
    ar["rx"][0], ar["ry"][0] = int(robot[0]), int(robot[1])
    meta[K.M_NODES] = 1
    meta[K.M_POOL] = k
    l0 = rollout_lower_bound(model, states, np.arange(k), psi, 0, cfg.max_depth, robot)
    u0 = float(model.Vext[states].mean())
    ar["ldef"][0] = ar["l"][0] = l0
    ar["u"][0] = max(u0, l0)
    trace_u = np.zeros(cfg.max_trials)
    trace_l = np.zeros(cfg.max_trials)
    queries = 0

    def call():
        return K.run_trials(meta, cfg.max_trials, cfg.epsilon_gap, ar["depth"], ar["rx"], ar["ry"],
                            ar["u"], ar["l"], ar["ldef"], ar["expanded"], ar["start"], ar["count"],
                            ar["e_r"], ar["e_u"], ar["e_l"], ar["e_child"], ar["pool_ids"],
                            ar["pool_states"], psi, model.gamma, model.is_lat, cfg.max_depth,
                            model.indptr, model.indices, model.cum, model.omega_cum,
                            model.det_next, model.det_obs, model.reward,
                            model.Vext, model.Q, model.steps, model.ny, model.out, model.invalid,
                            model.collide, model.feas, model.window, k, trace_u, trace_l)

    queries = _resume(model, call, lambda: meta[K.M_NEED_X:K.M_NEED_A + 1])
    n_nodes = int(meta[K.M_NODES])
    trials = int(meta[K.M_TRIALS])
    if ar["expanded"][0]:
        sizes = K.policy_sizes(n_nodes, ar["expanded"], ar["ldef"], ar["e_l"], ar["e_child"])
        child = ar["e_child"][0]
        act_size = np.array([sum(sizes[c] for c in child[a] if c >= 0) for a in range(A)])
        lower = ar["e_l"][0].copy()
        upper = ar["e_u"][0].copy()
        score = lower - cfg.lam * act_size
        if model.is_lat:
            # never prefer an all-invalid branch over one with a better-than-failure bound
            tail = -1.0 / (1.0 - model.gamma)
            viable = lower > tail + 1e-9
            if viable.any():
                score = np.where(viable, score, -np.inf)
        action = int(np.argmax(score))
    else:
        action, lower, upper, act_size = 0, np.full(A, np.nan), np.full(A, np.nan), np.zeros(A, np.int64)
    slim = {key: v[:n_nodes] if key not in ("pool_ids", "pool_states") else v[:meta[K.M_POOL]]
            for key, v in ar.items()}
    return DespotTree(action, float(ar["u"][0]), float(ar["l"][0]), trials, n_nodes,
                      trace_u[:trials].copy(), trace_l[:trials].copy(), lower, upper, act_size,
                      time.perf_counter() - t_start, queries, slim)


def despot_act(model: SearchModel, b0: np.ndarray, cfg: DespotConfig, robot=(0, 0),
               rng: Optional[np.random.Generator] = None) -> DespotTree:
    """Sample ``k_scenarios`` scenarios from ``b0`` and search."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    states, psi = sample_scenarios(np.asarray(b0, dtype=float), cfg.k_scenarios, cfg.max_depth, rng)
    return despot_search(model, states, psi, cfg, robot)
