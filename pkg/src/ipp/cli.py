"""``ipp`` command line: collect | estimate | train-prior | eval | sweep.

Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 runtime failure (including any failed sweep cell).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import harness
from .dynamics import InsufficientObservationsError
from .harness import AgentKind, ConfigError, ExperimentConfig, MissingArtifactError
from .prior_model import TrainingDivergedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="master seed (episode i uses seed + i)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--episodes", type=int, help="episodes to play")
    common.add_argument("--max-ticks", type=int, help="tick cap per episode")
    budget = common.add_mutually_exclusive_group()
    budget.add_argument("--budget-samples", type=int, help="planner samples per decision")
    budget.add_argument("--budget-ms", type=float, help="planner wall-clock budget per decision")
    common.add_argument("--agent", choices=[k.value for k in AgentKind])
    common.add_argument("--ground-truth-dynamics", action="store_true",
                        help="plan with the true environment constants instead of dynamics.json")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ipp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", parents=[common], help="play episodes and record logs + frames")
    c.add_argument("--policy", choices=["random", "planner"])
    c.add_argument("--p-flap", type=float, help="flap probability of the random policy")
    c.add_argument("--dynamics", help="dynamics JSON for the planner policy")

    e = sub.add_parser("estimate", parents=[common], help="fit gravity and action impacts")
    e.add_argument("--logs", help="JSONL trajectory log")

    t = sub.add_parser("train-prior", parents=[common], help="train the CNN prior")
    t.add_argument("--logs", help="JSONL trajectory log (frames.ippf alongside)")
    t.add_argument("--frames", help="frame sidecar")
    t.add_argument("--epochs", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--delta", type=int, help="action-count window in ticks")

    v = sub.add_parser("eval", parents=[common], help="score one agent at one budget")
    v.add_argument("--weights")
    v.add_argument("--dynamics")

    s = sub.add_parser("sweep", parents=[common], help="agents x budgets grid")
    s.add_argument("--budgets", required=True, help="comma-separated budgets")
    s.add_argument("--agents", default="pb-uniform,pb-cnn")
    s.add_argument("--budget-kind", choices=["samples", "ms"], default="samples")
    s.add_argument("--weights")
    s.add_argument("--dynamics")
    return p


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out is not None:
        kw["out_dir"] = args.out
    if args.max_ticks is not None:
        kw["max_ticks_per_episode"] = args.max_ticks
    if args.agent is not None:
        kw["agent_kind"] = AgentKind(args.agent)
    if args.ground_truth_dynamics:
        kw["use_ground_truth_dynamics"] = True
    if args.episodes is not None:
        kw["episodes_per_eval"] = args.episodes
        kw["collect_episodes"] = args.episodes
    if getattr(args, "policy", None):
        kw["collect_policy"] = args.policy
    if getattr(args, "p_flap", None) is not None:
        kw["collect_p_flap"] = args.p_flap
    train_kw = {}
    for flag, name in (("epochs", "epochs"), ("learning_rate", "learning_rate"), ("delta", "delta_window")):
        if getattr(args, flag, None) is not None:
            train_kw[name] = getattr(args, flag)
    try:
        if train_kw:
            kw["train"] = dataclasses.replace(cfg.train, **train_kw)
        if args.budget_samples is not None or args.budget_ms is not None:
            kw["planner"] = harness.with_budget(cfg.planner, args.budget_samples, args.budget_ms)
        return dataclasses.replace(cfg, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _run(args) -> int:
    cfg = _config(args)
    if args.command == "collect":
        if args.episodes is not None and args.episodes < 1:
            raise ConfigError("--episodes must be >= 1")
        _, summary = harness.collect(cfg, dynamics_path=args.dynamics)
        print(summary.line())
    elif args.command == "estimate":
        dyn = harness.estimate(cfg, args.logs)
        imp = " ".join(f"{a.name.lower()}=({v.mu:.6g},{v.sigma:.6g})" for a, v in dyn.impacts.items())
        print(f"g={dyn.g_hat!r} {imp}")
    elif args.command == "train-prior":
        _, history = harness.train_prior(cfg, args.logs, args.frames)
        print(f"trained epochs={len(history) - 1} initial_loss={history[0]:.6g} final_loss={history[-1]:.6g}")
    elif args.command == "eval":
        result = harness.evaluate(cfg, weights_path=args.weights, dynamics_path=args.dynamics)
        jpath, _ = harness.write_eval(cfg, result)
        print(f"{result.agent_kind.value} {result.budget_kind}={result.budget} "
              f"mean={result.mean:.3f} std={result.std:.3f} -> {jpath}")
    elif args.command == "sweep":
        try:
            budgets = [float(b) for b in args.budgets.split(",") if b.strip()]
            agents = [AgentKind(a.strip()) for a in args.agents.split(",") if a.strip()]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        outcome = harness.sweep(cfg, budgets, agents, args.budget_kind, args.weights, args.dynamics)
        for r in outcome.results:
            print(",".join(str(v) for v in r.csv_row()))
        print(f"wrote {outcome.csv_path}")
        if outcome.failures:
            for agent, budget, msg in outcome.failures:
                print(f"FAILED {agent} {budget}: {msg}", file=sys.stderr)
            return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"ipp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"ipp: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (InsufficientObservationsError, TrainingDivergedError, harness.EmptyDatasetError,
            ValueError, RuntimeError) as exc:
        print(f"ipp: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
