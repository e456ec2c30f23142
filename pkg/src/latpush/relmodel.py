"""Discretised hand-relative POMDP: grid, action set, tables, Bayes filter.

Cells are indexed ``ix * ny + iy`` (so the canonical order is (ix, iy)),
with the absorbing ``OUT`` cell last.  Observations are the two fingertip
bits packed as ``left + 2 * right``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from .physics import HandGeometry, PhysicsParams, sample_noise_batch, simulate_batch

log = logging.getLogger(__name__)

__all__ = [
    "RelGrid",
    "ActionSet",
    "GoalSpec",
    "InitialBeliefSpec",
    "DiscreteModel",
    "Scenario",
    "ImpossibleObservation",
    "build_discrete_model",
    "belief_update",
    "step_scenario",
    "discretize_initial_belief",
    "load_or_build_model",
    "N_OBS",
]

N_OBS = 4
CACHE_VERSION = 1


class ImpossibleObservation(ValueError):
    """The observation has zero probability under the predicted belief."""


@dataclass(frozen=True)
class RelGrid:
    x_min: float = 0.0
    x_max: float = 0.20
    y_min: float = -0.22
    y_max: float = 0.22
    resolution: float = 0.01

    def __post_init__(self):
        for lo, hi in ((self.x_min, self.x_max), (self.y_min, self.y_max)):
            k = (hi - lo) / self.resolution
            if hi <= lo or abs(k - round(k)) > 1e-9:
                raise ValueError("grid extents must be positive multiples of the resolution")

    @property
    def nx(self) -> int:
        return int(round((self.x_max - self.x_min) / self.resolution))

    @property
    def ny(self) -> int:
        return int(round((self.y_max - self.y_min) / self.resolution))

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def out(self) -> int:
        """Index of the absorbing OUT cell."""
        return self.n_cells

    @property
    def n_states(self) -> int:
        return self.n_cells + 1

    def index(self, ix: int, iy: int) -> int:
        if 0 <= ix < self.nx and 0 <= iy < self.ny:
            return ix * self.ny + iy
        return self.out

    def unravel(self, cell: int) -> Tuple[int, int]:
        if not 0 <= cell < self.n_cells:
            raise ValueError("OUT has no grid coordinates")
        return divmod(int(cell), self.ny)

    def cell_of(self, x: float, y: float) -> int:
        ix = math.floor((x - self.x_min) / self.resolution)
        iy = math.floor((y - self.y_min) / self.resolution)
        return self.index(ix, iy)

    def cells_of(self, xy: np.ndarray) -> np.ndarray:
        ix = np.floor((xy[:, 0] - self.x_min) / self.resolution).astype(np.int64)
        iy = np.floor((xy[:, 1] - self.y_min) / self.resolution).astype(np.int64)
        ok = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        return np.where(ok, ix * self.ny + iy, self.out)

    def center(self, cell: int) -> Tuple[float, float]:
        ix, iy = self.unravel(cell)
        return (self.x_min + (ix + 0.5) * self.resolution,
                self.y_min + (iy + 0.5) * self.resolution)

    @cached_property
    def centers(self) -> np.ndarray:
        """(n_cells, 2) cell centers in canonical order."""
        ix, iy = np.divmod(np.arange(self.n_cells), self.ny)
        return np.column_stack([self.x_min + (ix + 0.5) * self.resolution,
                                self.y_min + (iy + 0.5) * self.resolution])


@dataclass(frozen=True)
class ActionSet:
    """Eight one-cell translations of the hand (hand frame).

    Diagonals move one cell along each axis so every action ends on a
    lattice point.
    """

    steps: Tuple[Tuple[int, int], ...] = ((1, 0), (-1, 0), (0, 1), (0, -1),
                                          (1, 1), (1, -1), (-1, 1), (-1, -1))
    resolution: float = 0.01

    def __post_init__(self):
        s = set(self.steps)
        if any((-a, -b) not in s for a, b in self.steps):
            raise ValueError("action set must be closed under negation")

    def __len__(self) -> int:
        return len(self.steps)

    def displacement(self, a: int) -> np.ndarray:
        dx, dy = self.steps[a]
        return np.array([dx * self.resolution, dy * self.resolution])

    @cached_property
    def negation(self) -> Tuple[int, ...]:
        return tuple(self.steps.index((-a, -b)) for a, b in self.steps)

    def label(self, a: int) -> str:
        dx, dy = self.steps[a]
        return {1: "+", -1: "-", 0: ""}[dx] + ("x" if dx else "") + \
            {1: "+", -1: "-", 0: ""}[dy] + ("y" if dy else "")


@dataclass(frozen=True)
class GoalSpec:
    cx: float = 0.05
    size_x: float = 0.06
    size_y: float = 0.04

    def contains(self, x, y):
        return (np.abs(np.asarray(x) - self.cx) <= self.size_x / 2) & \
            (np.abs(np.asarray(y)) <= self.size_y / 2)


@dataclass(frozen=True)
class InitialBeliefSpec:
    cx: float = 0.13
    cy: float = 0.0
    std_x: float = 0.005
    std_y: float = 0.10

    def __post_init__(self):
        if not (self.std_x > 0 and self.std_y > 0):
            raise ValueError("initial belief standard deviations must be positive")

    def sample(self, rng: np.random.Generator) -> Tuple[float, float]:
        return (float(rng.normal(self.cx, self.std_x)), float(rng.normal(self.cy, self.std_y)))


class DiscreteModel:
    """Tabular transition/observation/reward model over ``grid.n_states``.

    ``T`` rows are stored per action in CSR form with probabilities and
    running cumulative sums (used by scenario stepping).
    """

    def __init__(self, grid: RelGrid, actions: ActionSet, indptr: np.ndarray,
                 indices: np.ndarray, probs: np.ndarray, omega: np.ndarray,
                 reward: np.ndarray, gamma: float = 0.99,
                 contact_rows: Optional[np.ndarray] = None, meta: Optional[dict] = None):
        self.grid = grid
        self.actions = actions
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.probs = np.ascontiguousarray(probs, dtype=float)
        self.omega = np.ascontiguousarray(omega, dtype=float)
        self.reward = np.ascontiguousarray(reward, dtype=float)
        self.gamma = float(gamma)
        n_a, n_s = len(actions), grid.n_states
        self.contact_rows = (np.zeros((n_a, n_s), dtype=bool) if contact_rows is None
                             else np.asarray(contact_rows, dtype=bool))
        self.meta = dict(meta or {})
        self.cum = np.empty_like(self.probs)
        for a in range(n_a):
            for s in range(n_s):
                lo, hi = self.indptr[a, s], self.indptr[a, s + 1]
                c = np.cumsum(self.probs[lo:hi])
                c[-1] = 1.0
                self.cum[lo:hi] = c
        self.omega_cum = np.cumsum(self.omega, axis=2)
        self.omega_cum[:, :, -1] = 1.0
        for arr in (self.indptr, self.indices, self.probs, self.cum, self.omega,
                    self.omega_cum, self.reward):
            arr.setflags(write=False)

    @property
    def n_states(self) -> int:
        return self.grid.n_states

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def out(self) -> int:
        return self.grid.out

    def row(self, s: int, a: int) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[a, s], self.indptr[a, s + 1]
        return self.indices[lo:hi], self.probs[lo:hi]

    def dense_row(self, s: int, a: int) -> np.ndarray:
        out = np.zeros(self.n_states)
        idx, p = self.row(s, a)
        out[idx] = p
        return out

    @cached_property
    def transition_matrices(self):
        """Per-action ``scipy.sparse.csr_matrix`` with T[s, s']."""
        mats = []
        n = self.n_states
        for a in range(self.n_actions):
            lo, hi = self.indptr[a, 0], self.indptr[a, n]
            mats.append(sp.csr_matrix((self.probs[lo:hi], self.indices[lo:hi],
                                       self.indptr[a] - lo), shape=(n, n)))
        return mats

    @cached_property
    def transition_transposed(self):
        return [m.T.tocsr() for m in self.transition_matrices]

    def goal_cells(self) -> np.ndarray:
        return np.flatnonzero(self.reward == 0.0)

    # ------------------------------------------------------------------ cache

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = dict(self.meta, version=CACHE_VERSION, gamma=self.gamma,
                    grid=dataclasses.asdict(self.grid),
                    actions=[list(s) for s in self.actions.steps],
                    action_resolution=self.actions.resolution)
        with open(path, "wb") as fh:
            np.savez_compressed(fh, indptr=self.indptr, indices=self.indices, probs=self.probs,
                                omega=self.omega, reward=self.reward,
                                contact_rows=self.contact_rows,
                                meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))

    @classmethod
    def load(cls, path) -> "DiscreteModel":
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            if meta.get("version") != CACHE_VERSION:
                raise ValueError(f"{path}: unsupported model cache version {meta.get('version')}")
            grid = RelGrid(**meta["grid"])
            actions = ActionSet(tuple(tuple(s) for s in meta["actions"]),
                                meta["action_resolution"])
            return cls(grid, actions, z["indptr"], z["indices"], z["probs"], z["omega"],
                       z["reward"], meta["gamma"], z["contact_rows"], meta)


def model_key(params: PhysicsParams, hand: HandGeometry, grid: RelGrid, actions: ActionSet,
              goal: GoalSpec, n_samples: int, seed: int, gamma: float = 0.99) -> str:
    """Stable hash of everything that determines a built model."""
    blob = json.dumps({
        "physics": dataclasses.asdict(params),
        "hand": [p.vertices.round(12).tolist() for p in hand.bodies + hand.sensors],
        "grid": dataclasses.asdict(grid),
        "actions": [list(s) for s in actions.steps] + [actions.resolution],
        "goal": dataclasses.asdict(goal),
        "n_samples": n_samples, "seed": seed, "gamma": gamma,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _row_samples(params, hand, grid, actions, cell, a, n_samples, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, cell, a]))
    ix, iy = grid.unravel(cell)
    lo = np.array([grid.x_min + ix * grid.resolution, grid.y_min + iy * grid.resolution])
    starts = lo + rng.random((n_samples, 2)) * grid.resolution
    mus, offsets = sample_noise_batch(params, rng, n_samples)
    d = actions.displacement(a)
    verts, normals, nverts = hand.packed
    out, obs, touched, status = simulate_batch(
        starts, d[0], d[1], mus, offsets, params.disc_radius, params.slip_gain,
        params.substep, params.contact_eps, verts, normals, nverts, 3)
    if status.any():
        from .physics import PenetrationUnresolvable
        raise PenetrationUnresolvable(f"cell {cell} action {a}: {int(status.sum())} samples")
    return grid.cells_of(out), obs, touched


def build_discrete_model(params: PhysicsParams, hand: HandGeometry, grid: RelGrid,
                         actions: ActionSet, goal: GoalSpec, n_samples: int = 1024,
                         seed: int = 0, gamma: float = 0.99,
                         rows: Optional[Sequence[Tuple[int, int]]] = None) -> DiscreteModel:
    """Monte-Carlo expectation of the continuous pushing model per (cell, action).

    Each cell stands for a uniform distribution over its area.  Every
    (cell, action) row draws its own samples from a stream derived from
    ``(seed, cell, action)``, so the result does not depend on iteration
    order.  ``rows`` restricts sampling to a subset (other rows are left as
    deterministic self-loops; only useful for fidelity checks).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n_a, n_s, out_cell = len(actions), grid.n_states, grid.out
    obs_counts = np.zeros((n_a, n_s, N_OBS))
    contact = np.zeros((n_a, n_s), dtype=bool)
    rows_idx, rows_p = {}, {}
    todo = rows if rows is not None else [(c, a) for a in range(n_a) for c in range(grid.n_cells)]
    for cell, a in todo:
        nxt, obs, touched = _row_samples(params, hand, grid, actions, cell, a, n_samples, seed)
        counts = np.bincount(nxt, minlength=n_s)
        support = np.flatnonzero(counts)
        rows_idx[cell, a] = support
        rows_p[cell, a] = counts[support] / n_samples
        np.add.at(obs_counts[a], (nxt, obs), 1.0)
        contact[a, cell] = bool(touched.any())

    # observation fallback for never-reached cells: sense at the cell center
    verts, normals, nverts = hand.packed
    center_obs = simulate_batch(grid.centers, 0.0, 0.0, np.ones(grid.n_cells), np.zeros(grid.n_cells),
                                params.disc_radius, 0.0, params.substep, params.contact_eps,
                                verts, normals, nverts, 3)[1]
    omega = np.zeros((n_a, n_s, N_OBS))
    for a in range(n_a):
        tot = obs_counts[a].sum(axis=1)
        seen = tot > 0
        omega[a, seen] = obs_counts[a, seen] / tot[seen, None]
        unseen = np.flatnonzero(~seen[:grid.n_cells])
        omega[a, unseen, center_obs[unseen]] = 1.0
        omega[a, out_cell] = 0.0
        omega[a, out_cell, 0] = 1.0

    indptr = np.zeros((n_a, n_s + 1), dtype=np.int64)
    idx_chunks, p_chunks = [], []
    pos = 0
    for a in range(n_a):
        for s in range(n_s):
            indptr[a, s] = pos
            if (s, a) in rows_idx:
                idx, p = rows_idx[s, a], rows_p[s, a]
            else:
                idx, p = np.array([s]), np.array([1.0])
            idx_chunks.append(idx)
            p_chunks.append(p)
            pos += len(idx)
        indptr[a, n_s] = pos
    reward = np.full(n_s, -1.0)
    inside = goal.contains(grid.centers[:, 0], grid.centers[:, 1])
    reward[:grid.n_cells][inside] = 0.0
    meta = {"key": model_key(params, hand, grid, actions, goal, n_samples, seed, gamma),
            "n_samples": n_samples, "seed": seed, "goal": dataclasses.asdict(goal)}
    return DiscreteModel(grid, actions, indptr, np.concatenate(idx_chunks),
                         np.concatenate(p_chunks), omega, reward, gamma, contact, meta)


def load_or_build_model(params: PhysicsParams, hand: HandGeometry, grid: RelGrid,
                        actions: ActionSet, goal: GoalSpec, n_samples: int = 1024,
                        seed: int = 0, gamma: float = 0.99, cache=None) -> DiscreteModel:
    """Build, or reuse a cache file whose key matches the inputs.

    ``cache`` may be a file path or a directory (the key names the file).
    """
    key = model_key(params, hand, grid, actions, goal, n_samples, seed, gamma)
    path = None
    if cache is not None:
        path = Path(cache)
        if path.is_dir() or not path.suffix:
            path = path / f"relmodel-{key}.npz"
        if path.exists():
            try:
                m = DiscreteModel.load(path)
                if m.meta.get("key") == key:
                    return m
                log.info("model cache %s is stale (key %s != %s)", path, m.meta.get("key"), key)
            except (OSError, ValueError, KeyError) as exc:
                log.warning("ignoring unreadable model cache %s: %s", path, exc)
    model = build_discrete_model(params, hand, grid, actions, goal, n_samples, seed, gamma)
    if path is not None:
        model.save(path)
    return model


# ---------------------------------------------------------------------- filter


def belief_update(model: DiscreteModel, b: np.ndarray, a: int, o: int) -> np.ndarray:
    """Bayes filter: predict through T(., a, .), weight by Omega(., a, o)."""
    pred = model.transition_transposed[a] @ b
    post = pred * model.omega[a, :, o]
    z = post.sum()
    if not z > 0.0:
        raise ImpossibleObservation(f"observation {o} has zero probability after action {a}")
    return post / z


def predict(model: DiscreteModel, b: np.ndarray, a: int) -> np.ndarray:
    return model.transition_transposed[a] @ b


def observation_probabilities(model: DiscreteModel, b: np.ndarray, a: int) -> np.ndarray:
    return predict(model, b, a) @ model.omega[a]


def step_scenario(model: DiscreteModel, s: int, a: int, psi_t) -> Tuple[int, int, float]:
    """Deterministic step given two uniforms (inverse CDF in canonical order)."""
    u1, u2 = psi_t
    lo, hi = model.indptr[a, s], model.indptr[a, s + 1]
    k = lo + int(np.searchsorted(model.cum[lo:hi], u1, side="right"))
    s_next = int(model.indices[min(k, hi - 1)])
    o = int(np.searchsorted(model.omega_cum[a, s_next], u2, side="right"))
    return s_next, min(o, N_OBS - 1), float(model.reward[s])


def sample_state(b: np.ndarray, u: float) -> int:
    c = np.cumsum(b)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), len(b) - 1))


class Scenario:
    """Initial state plus a lazily materialised stream of uniform pairs."""

    _CHUNK = 64

    def __init__(self, s0: int, seed):
        self.s0 = int(s0)
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._buf = np.empty((0, 2))

    @classmethod
    def sample(cls, b: np.ndarray, seed) -> "Scenario":
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        return cls(sample_state(b, rng.random()), seed)

    def psi(self, t: int) -> np.ndarray:
        while t >= len(self._buf):
            self._buf = np.vstack([self._buf, self._rng.random((self._CHUNK, 2))])
        return self._buf[t]


def discretize_initial_belief(spec: InitialBeliefSpec, grid: RelGrid) -> np.ndarray:
    """Gaussian measure of each cell rectangle; the remainder goes to OUT."""
    xe = grid.x_min + np.arange(grid.nx + 1) * grid.resolution
    ye = grid.y_min + np.arange(grid.ny + 1) * grid.resolution
    px = np.diff(ndtr((xe - spec.cx) / spec.std_x))
    py = np.diff(ndtr((ye - spec.cy) / spec.std_y))
    b = np.empty(grid.n_states)
    b[:grid.n_cells] = np.outer(px, py).ravel()
    b[grid.out] = max(0.0, 1.0 - b[:grid.n_cells].sum())
    return b / b.sum()
