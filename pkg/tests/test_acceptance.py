"""Acceptance criteria 1-10, each at its stated tolerance.

The episode-based criteria share one set of runs per (policy, environment).
``LATPUSH_ACCEPT_EPISODES`` sets the episode count (default 200).  Episode
summaries are cached under ``<model cache>/acceptance`` keyed by the
configuration and by a hash of the package source with comments and
docstrings removed, so any behavioural change recomputes them; set
``LATPUSH_ACCEPT_CACHE=off`` to always recompute.  A full cold run takes
several hours on one core.
"""
from __future__ import annotations

import ast
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import CRITERIA_REPORT
from latpush.harness import (ENV_NAMES, ExperimentConfig, check_theorem2, default_model_cache,
                             episode_seeds, replay_in_world, run_episode)
from latpush.relmodel import belief_update, load_or_build_model
from latpush.solvers.despot import DespotConfig, SearchModel, despot_act
from latpush.solvers.policies import make_policy

EPISODES = int(os.environ.get("LATPUSH_ACCEPT_EPISODES", "200"))
SEED = 0
POLICIES = ("rel-qmdp", "lift-qmdp", "rel-despot", "lat-despot")
ORACLE_FACTOR = 16

pytestmark = pytest.mark.acceptance


def report(n: int, ok: bool, detail: str) -> None:
    CRITERIA_REPORT[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


# ------------------------------------------------------------------ runs


def _source_hash() -> str:
    """Hash of the package AST without docstrings (comments never reach the AST)."""
    import latpush

    h = hashlib.sha256()
    root = Path(latpush.__file__).parent
    for path in sorted(root.rglob("*.py")):
        if path.name == "cli.py":
            continue
        tree = ast.parse(path.read_text())
        for node in ast.walk(tree):
            body = getattr(node, "body", None)
            if (isinstance(body, list) and body and isinstance(body[0], ast.Expr)
                    and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str)):
                node.body = body[1:] or [ast.Pass()]
        h.update(str(path.relative_to(root)).encode())
        h.update(ast.dump(tree).encode())
    for path in sorted((root / "data").rglob("*.json")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _summary(lg) -> dict:
    return {
        "value": lg.value, "cause": lg.cause, "in_goal": lg.in_goal.astype(int).tolist(),
        "infeasible": lg.infeasible_executions,
        "decision_times": [r.decision_time for r in lg.records if r.action >= 0],
        "bounds_ok": all(r.bounds_ok for r in lg.records),
        "edges_evaluated": lg.edges_evaluated, "edges_window": lg.edges_window,
    }


class Runs:
    """Lazily computed, optionally cached episode summaries."""

    def __init__(self, stack, worlds, rel_world):
        self.stack, self.worlds, self.rel_world = stack, worlds, rel_world
        self.cfg = ExperimentConfig(episodes=EPISODES, seed=SEED)
        self.mem = {}
        flag = os.environ.get("LATPUSH_ACCEPT_CACHE", "")
        self.dir = None if flag.lower() in ("0", "off", "no") else \
            Path(flag or default_model_cache() / "acceptance")
        key = json.dumps({"model": stack.model.meta.get("key"), "src": _source_hash(),
                          "cfg": {k: v for k, v in self.cfg.__dict__.items()}}, sort_keys=True)
        self.key = hashlib.sha256(key.encode()).hexdigest()[:16]

    def _path(self, policy, env):
        return None if self.dir is None else self.dir / f"{self.key}-{policy}-{env}.json"

    def get(self, policy: str, env: str) -> list:
        if (policy, env) in self.mem:
            return self.mem[policy, env]
        path = self._path(policy, env)
        if path is not None and path.exists():
            self.mem[policy, env] = json.loads(path.read_text())
            return self.mem[policy, env]
        if policy in ("rel-qmdp", "rel-despot"):
            self._run_blind(policy)
        else:
            self._store(policy, env, self._run(policy, self.worlds[env]))
        return self.mem[policy, env]

    def _store(self, policy, env, logs):
        self.mem[policy, env] = [_summary(lg) for lg in logs]
        path = self._path(policy, env)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.mem[policy, env]))

    def _policy(self, name, world):
        return make_policy(name, self.stack.vi, self.stack.rel_search, world.search_model,
                           self.cfg.despot())

    def _run(self, policy_name, world):
        policy = self._policy(policy_name, world)
        return [run_episode(self.cfg, policy, world, s, i)
                for i, s in enumerate(episode_seeds(self.cfg.seed, self.cfg.episodes))]

    def _run_blind(self, policy_name):
        # lattice-blind: one run in the rel world, re-expressed in each layout
        logs = self._run(policy_name, self.rel_world)
        self._store(policy_name, "rel", logs)
        for env, world in self.worlds.items():
            policy = self._policy(policy_name, world)
            self._store(policy_name, env, [replay_in_world(lg, self.cfg, world, policy) for lg in logs])


@pytest.fixture(scope="module")
def runs(stack, worlds, rel_world):
    return Runs(stack, worlds, rel_world)


def _success(summ) -> np.ndarray:
    return np.array([s["in_goal"][-1] for s in summ], dtype=float)


def _values(summ) -> np.ndarray:
    return np.array([s["value"] for s in summ])


def _ci(x: np.ndarray) -> float:
    return 1.96 * x.std(ddof=1) / math.sqrt(len(x)) if len(x) > 1 else 0.0


def _p_ci(p: float, n: int) -> float:
    return 1.96 * math.sqrt(max(p * (1 - p), 0.0) / n)


# -------------------------------------------------------------- criteria


def test_c01_theorem2_scenario_check(stack, worlds):
    t0 = time.perf_counter()
    rep = check_theorem2(stack, [worlds[e] for e in ENV_NAMES], 10_000, seed=SEED)
    dt = time.perf_counter() - t0
    ok = rep.ok and dt < 120.0
    report(1, ok, f"pairs={rep.pairs} violations={rep.violations} prefix_mismatches="
                  f"{rep.prefix_mismatches} max(lat-rel)={rep.max_violation:.3g} "
                  f"invalidated={rep.invalidated} runtime={dt:.0f}s")
    assert rep.violations == 0 and rep.prefix_mismatches == 0 and rep.max_violation <= 0.0
    assert dt < 120.0


def test_c02_no_infeasible_actions(runs):
    counts = {(p, e): sum(s["infeasible"] for s in runs.get(p, e))
              for p in ("lat-despot", "lift-qmdp") for e in ENV_NAMES}
    ok = all(v == 0 for v in counts.values())
    report(2, ok, "infeasible executions " + ", ".join(f"{p}/{e}={v}" for (p, e), v in counts.items()))
    assert ok


def test_c03_qualitative_ordering(runs):
    n = EPISODES
    succ = {(p, e): float(_success(runs.get(p, e)).mean()) for p in POLICIES for e in ENV_NAMES}
    detail, ok_a, ok_b = [], True, True
    for e in ENV_NAMES:
        rq = succ["rel-qmdp", e]
        lowest_other = min(succ[p, e] for p in POLICIES if p != "rel-qmdp")
        tied = rq <= lowest_other or rq - lowest_other <= _p_ci(lowest_other, n)
        ok_a &= tied and rq < 0.5
        detail.append(f"{e}: " + " ".join(f"{p}={succ[p, e]:.2f}" for p in POLICIES))
    for e in ("left", "complex"):
        lat = succ["lat-despot", e]
        ok_b &= all(lat >= succ[p, e] for p in POLICIES)
        ok_b &= lat - succ["rel-despot", e] >= 0.10
    ok_c = succ["lat-despot", "empty"] >= 0.80
    ok = ok_a and ok_b and ok_c
    report(3, ok, f"(a)={'ok' if ok_a else 'no'} (b)={'ok' if ok_b else 'no'} "
                  f"(c)={'ok' if ok_c else 'no'}; success@100 " + "; ".join(detail))
    assert ok_a, "Rel-QMDP is not the (tied-)lowest below 50% everywhere"
    assert ok_b, "Lat-DESPOT does not dominate in left/complex by the required margin"
    assert ok_c, "Lat-DESPOT success on the empty table is below 80%"


def test_c04_upper_bound_mirror(runs):
    ref = _values(runs.get("rel-despot", "rel"))
    ref_m, ref_ci = ref.mean(), _ci(ref)
    ok, detail = True, []
    for e in ENV_NAMES:
        for p in POLICIES:
            v = _values(runs.get(p, e))
            m, ci = v.mean(), _ci(v)
            good = ref_m >= m or ref_m + ref_ci >= m - ci
            ok &= good
            if not good or p == "lat-despot":
                detail.append(f"{p}/{e}={m:.1f}+-{ci:.1f}")
    report(4, ok, f"rel-despot on rel {ref_m:.1f}+-{ref_ci:.1f} vs " + ", ".join(detail))
    assert ok


def test_c05_value_iteration(stack):
    vi, model = stack.vi, stack.model
    v_out = float(vi.V[model.out])
    ok = vi.residual < 1e-6 and abs(v_out + 1.0 / (1.0 - model.gamma)) <= 1e-6 / (1.0 - model.gamma)
    report(5, ok, f"residual={vi.residual:.2e} V(OUT)={v_out:.9f}")
    assert vi.residual < 1e-6
    assert v_out == pytest.approx(-100.0, abs=1e-6 / (1.0 - model.gamma))


def test_c06_filter_matches_enumeration(stack):
    model = stack.model
    rng = np.random.default_rng(6)
    S = model.n_states
    worst = 0.0
    done = 0
    while done < 1000:
        b = rng.dirichlet(np.full(S, 0.05))
        a, o = int(rng.integers(model.n_actions)), int(rng.integers(4))
        # brute force: sum over every (s, s') pair explicitly
        post = np.zeros(S)
        for s in np.flatnonzero(b):
            idx, p = model.row(s, a)
            for s2, pr in zip(idx, p):
                post[s2] += b[s] * pr * model.omega[a, s2, o]
        if post.sum() == 0.0:
            continue
        post /= post.sum()
        worst = max(worst, float(np.abs(belief_update(model, b, a, o) - post).max()))
        done += 1
    report(6, worst <= 1e-12, f"max |filter - enumeration| = {worst:.2e} over {done} triples")
    assert worst <= 1e-12


def test_c07_model_fidelity(stack):
    st, model = stack, stack.model
    n = int(model.meta["n_samples"])
    oracle = load_or_build_model(st.params, st.hand, st.grid, st.actions, st.goal, n * ORACLE_FACTOR,
                                 int(model.meta["seed"]) + 1, model.gamma, default_model_cache())
    rows = np.argwhere(model.contact_rows[:, :st.grid.n_cells])
    tv = np.array([0.5 * np.abs(model.dense_row(s, a) - oracle.dense_row(s, a)).sum() for a, s in rows])
    frac = float(np.mean(tv <= 0.05))
    report(7, frac >= 0.99, f"{frac:.4f} of {len(rows)} contact rows within TV 0.05 "
                            f"(max {tv.max():.3f}) against a {n * ORACLE_FACTOR}-sample build")
    assert frac >= 0.99


def test_c08_lazy_construction_economy(runs):
    summ = runs.get("lat-despot", "empty")
    ev = sum(s["edges_evaluated"] for s in summ)
    win = sum(s["edges_window"] for s in summ)
    ratio = ev / win
    worst = max(s["edges_evaluated"] / s["edges_window"] for s in summ if s["edges_window"])
    report(8, ratio < 0.25, f"evaluated/window edges = {ev}/{win} = {ratio:.3f} "
                            f"(worst episode {worst:.3f})")
    assert ratio < 0.25


def _toy_model():
    """Six cells, deterministic random transitions and observations, OUT unreachable."""
    from latpush.relmodel import ActionSet, DiscreteModel, RelGrid
    from latpush.solvers.vi import VISolution

    rng = np.random.default_rng(9)
    grid = RelGrid(0.0, 0.02, 0.0, 0.03, 0.01)
    actions = ActionSet()
    S, A = grid.n_states, len(actions)
    nxt = rng.integers(grid.n_cells, size=(A, S))
    nxt[:, grid.out] = grid.out
    indptr = np.tile(np.arange(S + 1), (A, 1)) + (np.arange(A) * S)[:, None]
    omega = np.zeros((A, S, 4))
    omega[np.arange(A)[:, None], np.arange(S)[None, :], rng.integers(4, size=(A, S))] = 1.0
    reward = np.append(-rng.random(grid.n_cells), -1.0)
    model = DiscreteModel(grid, actions, indptr, nxt.ravel(), np.ones(A * S), omega, reward, 0.9)
    # V = 0 bounds every truncated return from above since rewards are <= 0
    vi = VISolution(np.zeros(S), np.zeros((S, A)), 0.9, 0.0, 0)
    return model, vi, nxt


def _exhaustive(model, nxt, s, depth) -> np.ndarray:
    """Per-action optimal truncated return with zero terminal value."""
    if depth == 0:
        return np.zeros(1)
    return np.array([model.reward[s] + model.gamma * _exhaustive(model, nxt, nxt[a, s], depth - 1).max()
                     for a in range(model.n_actions)])


def test_c09_despot_sanity(runs, stack):
    model, vi, nxt = _toy_model()
    sm = SearchModel(model, vi)
    cfg = DespotConfig(k_scenarios=8, max_trials=200, max_depth=3, lam=0.0, epsilon_gap=0.0)
    mismatches, toy_bounds_ok = 0, True
    for s0 in range(model.grid.n_cells):
        b0 = np.zeros(model.n_states)
        b0[s0] = 1.0
        tree = despot_act(sm, b0, cfg, rng=np.random.default_rng(s0))
        q = _exhaustive(model, nxt, s0, 3)
        # ties between actions with the same successor are legitimate either way
        mismatches += q[tree.action] < q.max() - 1e-12 or not math.isclose(tree.root_l, q.max(),
                                                                            abs_tol=1e-12)
        toy_bounds_ok &= bool(np.all(tree.trace_l <= tree.trace_u))
    # the sandwich l <= u after every trial of every search in the episode runs
    run_ok = all(s["bounds_ok"] for p in ("rel-despot", "lat-despot") for e in ENV_NAMES
                 for s in runs.get(p, e))
    run_ok &= all(s["bounds_ok"] for s in runs.get("rel-despot", "rel"))
    ok = mismatches == 0 and toy_bounds_ok and run_ok
    report(9, ok, f"toy mismatches={mismatches}/{model.grid.n_cells}, l<=u after every trial: "
                  f"toy={toy_bounds_ok} episodes={run_ok}")
    assert mismatches == 0
    assert toy_bounds_ok and run_ok


def test_c10_decision_time(runs):
    times = [t for e in ENV_NAMES for s in runs.get("lat-despot", e) for t in s["decision_times"]]
    mean = float(np.mean(times))
    report(10, mean <= 5.0, f"mean Lat-DESPOT decision time {mean:.3f}s (max {max(times):.2f}s) "
                            f"over {len(times)} decisions")
    assert mean <= 5.0
