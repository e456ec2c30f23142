"""Executable policies over the relative belief (and lattice point)."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..lattice import FeasibilityCache
from .despot import DespotConfig, DespotTree, SearchModel, despot_act
from .vi import VISolution, qmdp_values

__all__ = ["NoFeasibleAction", "Policy", "RelQMDP", "LiftQMDP", "RelDespot", "LatDespot",
           "RandomPolicy", "lift_act", "make_policy", "POLICY_NAMES"]

POLICY_NAMES = ("rel-qmdp", "lift-qmdp", "rel-despot", "lat-despot")


class NoFeasibleAction(RuntimeError):
    """Every action out of the current lattice point is infeasible."""


def lift_act(preference: Sequence[int], cache: FeasibilityCache, p) -> int:
    """First action in ``preference`` whose edge out of ``p`` is feasible."""
    for a in preference:
        if cache.feasible(p, int(a)):
            return int(a)
    raise NoFeasibleAction(f"no feasible action at lattice point {tuple(p)}")


class Policy:
    """``act`` maps (belief, lattice point) to an action index."""

    name = "policy"
    uses_lattice = False

    def reset(self, seed=None, cache: Optional[FeasibilityCache] = None) -> None:
        self.cache = cache

    def act(self, b: np.ndarray, p) -> int:
        raise NotImplementedError

    @property
    def last_tree(self) -> Optional[DespotTree]:
        return None


class RelQMDP(Policy):
    name = "rel-qmdp"

    def __init__(self, vi: VISolution):
        self.vi = vi

    def act(self, b, p) -> int:
        return int(np.argmax(qmdp_values(self.vi, b)))


class LiftQMDP(Policy):
    name = "lift-qmdp"
    uses_lattice = True

    def __init__(self, vi: VISolution):
        self.vi = vi

    def act(self, b, p) -> int:
        q = qmdp_values(self.vi, b)
        order = np.argsort(-q, kind="stable")
        return lift_act(order, self.cache, p)


class _DespotPolicy(Policy):
    def __init__(self, cfg: DespotConfig):
        self.cfg = cfg
        self._tree = None
        self._rng = np.random.default_rng(cfg.seed)

    def reset(self, seed=None, cache=None) -> None:
        super().reset(seed, cache)
        self._rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        self._tree = None

    @property
    def last_tree(self):
        return self._tree


class RelDespot(_DespotPolicy):
    """Search on the relative model; lattice-blind."""

    name = "rel-despot"

    def __init__(self, model: SearchModel, cfg: DespotConfig = DespotConfig()):
        if model.is_lat:
            raise ValueError("rel-despot needs a relative search model")
        super().__init__(cfg)
        self.model = model

    def act(self, b, p) -> int:
        self._tree = despot_act(self.model, b, self.cfg, (0, 0), self._rng)
        return self._tree.action


class LatDespot(_DespotPolicy):
    """Search on the lattice model; built per episode around its cache."""

    name = "lat-despot"
    uses_lattice = True

    def __init__(self, factory, cfg: DespotConfig = DespotConfig()):
        super().__init__(cfg)
        self.factory = factory  # cache -> SearchModel
        self.model = None

    def reset(self, seed=None, cache=None) -> None:
        super().reset(seed, cache)
        self.model = self.factory(cache) if cache is not None else None

    def act(self, b, p) -> int:
        self._tree = despot_act(self.model, b, self.cfg, tuple(p), self._rng)
        return self._tree.action


class RandomPolicy(Policy):
    name = "random"

    def __init__(self, n_actions: int = 8):
        self.n_actions = n_actions
        self._rng = np.random.default_rng(0)

    def reset(self, seed=None, cache=None) -> None:
        super().reset(seed, cache)
        self._rng = np.random.default_rng(seed)

    def act(self, b, p) -> int:
        return int(self._rng.integers(self.n_actions))


def make_policy(name: str, vi: VISolution, rel_search: SearchModel, lat_factory,
                cfg: DespotConfig = DespotConfig()) -> Policy:
    if name == "rel-qmdp":
        return RelQMDP(vi)
    if name == "lift-qmdp":
        return LiftQMDP(vi)
    if name == "rel-despot":
        return RelDespot(rel_search, cfg)
    if name == "lat-despot":
        return LatDespot(lat_factory, cfg)
    raise ValueError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")
