"""Command line entry point: ``latpush run | check-theorem2 | build-model``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from .harness import (ENV_NAMES, ExperimentConfig, build_stack, check_theorem2, default_model_cache,
                      evaluate, make_world)
from .solvers.policies import POLICY_NAMES

log = logging.getLogger("latpush")

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latpush", description="Planar pushing under pose uncertainty.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="evaluate a policy in an environment")
    run.add_argument("--config", help="JSON file with ExperimentConfig fields; flags override it")
    run.add_argument("--env", choices=ENV_NAMES)
    run.add_argument("--policy", choices=POLICY_NAMES)
    run.add_argument("--episodes", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="per-step CSV with summary rows")
    run.add_argument("--plot", help="success / active curves as SVG")
    run.add_argument("--model-cache", help="model cache file or directory")
    run.add_argument("--trace", action="store_true", help="log every step with root bounds")

    th = sub.add_parser("check-theorem2", help="replay action sequences through both models")
    th.add_argument("--pairs", type=int, default=10_000)
    th.add_argument("--horizon", type=int, default=100)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--model-cache")

    bm = sub.add_parser("build-model", help="build (or load) the discrete model and solve it")
    bm.add_argument("--samples", type=int, default=1024)
    bm.add_argument("--seed", type=int, default=0)
    bm.add_argument("--model-cache")
    return p


def _run(args) -> int:
    base = ExperimentConfig.load(args.config).__dict__ if args.config else {}
    for key in ("env", "policy", "episodes", "seed", "out", "plot", "model_cache"):
        v = getattr(args, key)
        if v is not None:
            base[key] = v
    if args.trace:
        base["trace"] = True
    cfg = ExperimentConfig(**base)
    stack = build_stack(cfg)
    world = make_world(cfg.env, stack)
    bound_violations = 0

    def progress(i, lg):
        nonlocal bound_violations
        for r in lg.records:
            if not r.bounds_ok:
                bound_violations += 1
            if cfg.trace:
                log.info("ep %d t %d a %d o %d r %.0f goal %d u %.3f l %.3f dt %.3f", i, r.t, r.action,
                         r.obs, r.reward, r.in_goal, r.root_u, r.root_l, r.decision_time)
        log.info("episode %d/%d: %s value %.2f in goal at end %s", i + 1, cfg.episodes, lg.cause,
                 lg.value, bool(lg.in_goal[-1]))

    m, _ = evaluate(cfg, stack, world, progress)
    print(json.dumps({"env": cfg.env, "policy": cfg.policy, **m.to_dict()}, indent=2))
    lattice_aware = cfg.policy in ("lift-qmdp", "lat-despot")
    bad = False
    if lattice_aware and m.infeasible_executions:
        log.error("%s executed %d infeasible actions", cfg.policy, m.infeasible_executions)
        bad = True
    if bound_violations:
        log.error("root lower bound exceeded upper bound %d times", bound_violations)
        bad = True
    return EXIT_VIOLATION if bad else EXIT_OK


def _check_theorem2(args) -> int:
    cfg = ExperimentConfig(model_cache=args.model_cache)
    stack = build_stack(cfg)
    worlds = [make_world(name, stack) for name in ENV_NAMES]
    rep = check_theorem2(stack, worlds, args.pairs, args.horizon, args.seed)
    print(json.dumps(rep.__dict__ | {"ok": rep.ok}, indent=2))
    return EXIT_OK if rep.ok else EXIT_VIOLATION


def _build_model(args) -> int:
    cfg = ExperimentConfig(model={"n_samples": args.samples, "seed": args.seed},
                           model_cache=args.model_cache)
    stack = build_stack(cfg)
    vi, model = stack.vi, stack.model
    v_out = float(vi.V[model.out])
    report = {"key": model.meta.get("key"), "cache": str(args.model_cache or default_model_cache()),
              "states": model.n_states, "vi_residual": vi.residual, "vi_iterations": vi.iterations,
              "V_out": v_out}
    print(json.dumps(report, indent=2))
    ok = vi.residual < 1e-6 and abs(v_out + 1.0 / (1.0 - model.gamma)) < 1e-6
    return EXIT_OK if ok else EXIT_VIOLATION


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "run":
            return _run(args)
        if args.command == "check-theorem2":
            return _check_theorem2(args)
        return _build_model(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
