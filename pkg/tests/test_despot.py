from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latpush.lattice import LatticePoint
from latpush.relmodel import ActionSet, DiscreteModel, RelGrid
from latpush.solvers.despot import (DespotConfig, SearchModel, deterministic_tables, despot_act,
                                    despot_search, rollout_lower_bound, sample_scenarios)
from latpush.solvers.policies import (LiftQMDP, NoFeasibleAction, RelDespot, RelQMDP, lift_act,
                                      make_policy)
from latpush.solvers.vi import VISolution


# ------------------------------------------------------------ reference rollout


def _inv_cdf(cum_row, u):
    for k, c in enumerate(cum_row[:-1]):
        if u < c:
            return k
    return len(cum_row) - 1


def reference_rollout(sm: SearchModel, states, ids, psi, t0, max_depth, robot=(0, 0)):
    """Per-scenario particle-QMDP rollout without any batching tricks."""
    rel, gamma = sm.rel, sm.gamma
    tail = -1.0 / (1.0 - gamma)
    cache = sm.lat.cache if sm.is_lat else None
    total = 0.0
    live = []  # [state, history, robot]
    for i, s in zip(ids, states):
        if s in (sm.out, sm.invalid):
            total += tail
        else:
            live.append([int(s), (), tuple(robot), int(i)])
    disc = 1.0
    for t in range(t0, max_depth):
        if not live:
            break
        groups = {}
        for sc in live:
            groups.setdefault(sc[1], []).append(sc)
        nxt = []
        for hist, members in groups.items():
            score = sum(sm.Q[sc[0]] for sc in members)
            rx, ry = members[0][2]
            if sm.is_lat:
                order = sorted(range(len(score)), key=lambda a: (-score[a], a))
                ok = [a for a in order if cache.feasible((rx, ry), a)]
                if not ok:
                    total += len(members) * disc * tail
                    continue
                a = ok[0]
            else:
                a = int(np.argmax(score))
            for s, _, _, i in members:
                idx, _ = rel.row(s, a)
                lo, hi = rel.indptr[a, s], rel.indptr[a, s + 1]
                s2 = int(idx[_inv_cdf(rel.cum[lo:hi], psi[i, t, 0])])
                if s2 == sm.out:
                    total += disc * (tail if sm.is_lat else rel.reward[s] + gamma * tail)
                    continue
                p = (rx + sm.steps[a, 0], ry + sm.steps[a, 1])
                if sm.is_lat and sm.lat.object_collides(p, s2):
                    total += disc * tail
                    continue
                total += disc * rel.reward[s]
                o = _inv_cdf(rel.omega_cum[a, s2], psi[i, t, 1])
                nxt.append([s2, hist + (o,), p, i])
        live = nxt
        disc *= gamma
    return total / len(states)


@pytest.fixture(scope="module")
def lat_search(worlds):
    return {n: worlds[n].search_model(worlds[n].new_cache()) for n in ("empty", "complex")}


def test_rollout_matches_reference_relative(stack):
    rng = np.random.default_rng(0)
    for trial in range(6):
        states, psi = sample_scenarios(stack.b0, 48, 30, rng)
        if trial % 2:
            states[:24] = states[0]  # many duplicates exercise the leader/follower path
        ids = np.arange(48)
        got = rollout_lower_bound(stack.rel_search, states, ids, psi, 0, 30)
        want = reference_rollout(stack.rel_search, states, ids, psi, 0, 30)
        assert got == pytest.approx(want, abs=1e-9)


@pytest.mark.parametrize("env", ["empty", "complex"])
def test_rollout_matches_reference_lattice(stack, lat_search, env):
    sm = lat_search[env]
    rng = np.random.default_rng(1)
    for robot in [(0, 0), (0, -20), (30, 0)]:
        states, psi = sample_scenarios(stack.b0, 32, 25, rng)
        states = sm.root_states(states)
        ids = np.arange(32)
        got = rollout_lower_bound(sm, states, ids, psi, 0, 25, robot)
        want = reference_rollout(sm, states, ids, psi, 0, 25, robot)
        assert got == pytest.approx(want, abs=1e-9)


def test_deterministic_tables(stack):
    m = stack.model
    det_next, det_obs = deterministic_tables(m)
    assert det_next.shape == (8, m.n_states + 1)
    for a in range(8):
        for s in range(0, m.n_states, 37):
            idx, p = m.row(s, a)
            assert det_next[a, s] == (idx[0] if len(idx) == 1 else -1)
            row = m.omega[a, s]
            assert det_obs[a, s] == (int(row.argmax()) if row.max() == 1.0 else -1)
    assert np.all(det_next[:, -1] == -1)


def test_config_validation():
    with pytest.raises(ValueError):
        DespotConfig(k_scenarios=0)
    with pytest.raises(ValueError):
        DespotConfig(lam=-1.0)
    assert DespotConfig.from_dict({"lambda": 0.5}).lam == 0.5


# ------------------------------------------------------------ toy exhaustive


def _toy(seed):
    rng = np.random.default_rng(seed)
    grid = RelGrid(0.0, 0.02, 0.0, 0.03, 0.01)
    acts = ActionSet()
    S, A = grid.n_states, len(acts)
    nxt = rng.integers(grid.n_cells, size=(A, S))
    nxt[:, grid.out] = grid.out
    indptr = np.tile(np.arange(S + 1), (A, 1)) + (np.arange(A) * S)[:, None]
    omega = np.zeros((A, S, 4))
    omega[np.arange(A)[:, None], np.arange(S)[None, :], rng.integers(4, size=(A, S))] = 1.0
    reward = np.append(-rng.random(grid.n_cells), -1.0)
    m = DiscreteModel(grid, acts, indptr, nxt.ravel(), np.ones(A * S), omega, reward, 0.9)
    return m, nxt


def _exhaustive(m, nxt, s, depth):
    if depth == 0:
        return np.zeros(1)
    return np.array([m.reward[s] + m.gamma * _exhaustive(m, nxt, nxt[a, s], depth - 1).max()
                     for a in range(m.n_actions)])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_toy_search_matches_exhaustive(seed, depth):
    m, nxt = _toy(seed)
    vi = VISolution(np.zeros(m.n_states), np.zeros((m.n_states, 8)), m.gamma, 0.0, 0)
    sm = SearchModel(m, vi)
    cfg = DespotConfig(k_scenarios=4, max_trials=300, max_depth=depth, lam=0.0, epsilon_gap=0.0)
    for s0 in range(m.grid.n_cells):
        b0 = np.zeros(m.n_states)
        b0[s0] = 1.0
        tree = despot_act(sm, b0, cfg, rng=np.random.default_rng(0))
        q = _exhaustive(m, nxt, s0, depth)
        assert q[tree.action] == pytest.approx(q.max(), abs=1e-12)
        assert tree.root_l == pytest.approx(q.max(), abs=1e-12)
        assert tree.root_u == pytest.approx(q.max(), abs=1e-12)


# ------------------------------------------------------------ real model


def test_bounds_sandwich_and_monotone_gap(stack, lat_search):
    cfg = DespotConfig(k_scenarios=64, max_trials=80)
    for sm, robot in [(stack.rel_search, (0, 0)), (lat_search["empty"], (0, 0)),
                      (lat_search["complex"], (0, -25))]:
        tree = despot_act(sm, stack.b0, cfg, robot, np.random.default_rng(3))
        assert tree.trials >= 1
        assert np.all(tree.trace_l <= tree.trace_u + 1e-12)
        assert np.all(np.diff(tree.trace_u) <= 1e-12)
        assert np.all(np.diff(tree.trace_l) >= -1e-12)
        assert tree.root_l <= tree.root_u
        assert -100.0 - 1e-9 <= tree.root_l and tree.root_u <= 0.0
        root = tree.node(0)
        assert root.depth == 0 and len(root.scenario_ids) == 64 and root.children
        for (a, o), c in root.children.items():
            child = tree.node(c)
            step = stack.actions.steps[a]
            assert child.depth == 1 and child.robot == (robot[0] + step[0], robot[1] + step[1])


def test_search_is_deterministic(stack):
    cfg = DespotConfig(k_scenarios=32, max_trials=30)
    t1 = despot_act(stack.rel_search, stack.b0, cfg, rng=np.random.default_rng(5))
    t2 = despot_act(stack.rel_search, stack.b0, cfg, rng=np.random.default_rng(5))
    assert (t1.action, t1.root_u, t1.root_l, t1.n_nodes) == (t2.action, t2.root_u, t2.root_l, t2.n_nodes)
    assert np.array_equal(t1.trace_u, t2.trace_u)


def test_lat_search_only_uses_evaluated_edges(stack, lat_search):
    sm = lat_search["complex"]
    cfg = DespotConfig(k_scenarios=32, max_trials=40)
    tree = despot_act(sm, stack.b0, cfg, (1, -28), np.random.default_rng(0))
    assert tree.edge_queries > 0
    ar = tree._arrays
    w = sm.window
    for i in np.flatnonzero(ar["expanded"]):
        assert np.all(sm.feas[ar["rx"][i] + w, ar["ry"][i] + w] != 0)


def test_lat_root_avoids_infeasible_action_at_reach_limit(stack, lat_search, worlds):
    sm = lat_search["empty"]
    cfg = DespotConfig(k_scenarios=32, max_trials=20)
    tree = despot_act(sm, stack.b0, cfg, (45, 0), np.random.default_rng(0))
    assert not sm.lat.cache.feasible((45, 0), 0)
    assert sm.lat.cache.feasible((45, 0), tree.action)


def test_explicit_scenarios_entry_point(stack):
    rng = np.random.default_rng(2)
    states, psi = sample_scenarios(stack.b0, 16, 60, rng)
    tree = despot_search(stack.rel_search, states, psi, DespotConfig(k_scenarios=16, max_trials=10))
    assert 0 <= tree.action < 8 and tree.trials <= 10
    assert len(tree.action_lower) == 8 and np.all(tree.action_size >= 1)


# ------------------------------------------------------------ policies


class _Cache:
    def __init__(self, ok):
        self.ok = set(ok)

    def feasible(self, p, a):
        return a in self.ok


def test_lift_act_order_and_failure():
    assert lift_act([3, 1, 0], _Cache({0, 1}), (0, 0)) == 1
    with pytest.raises(NoFeasibleAction):
        lift_act(range(8), _Cache(set()), (0, 0))


def test_qmdp_policies(stack):
    b = stack.b0
    a_rel = RelQMDP(stack.vi).act(b, None)
    lift = LiftQMDP(stack.vi)
    lift.reset(cache=_Cache(set(range(8)) - {a_rel}))
    a_lift = lift.act(b, LatticePoint(0, 0))
    assert a_lift != a_rel
    q = b @ stack.vi.Q
    assert q[a_lift] == max(q[a] for a in range(8) if a != a_rel)


def test_make_policy(stack, worlds):
    for name in ("rel-qmdp", "lift-qmdp", "rel-despot", "lat-despot"):
        p = make_policy(name, stack.vi, stack.rel_search, worlds["empty"].search_model)
        assert p.name == name
    with pytest.raises(ValueError):
        make_policy("greedy", stack.vi, stack.rel_search, None)
    with pytest.raises(ValueError):
        RelDespot(worlds["empty"].search_model(worlds["empty"].new_cache()))
