"""Command-line entry point ``robust-ctrl``.

Subcommands::

    robust-ctrl run <config.json>
    robust-ctrl study <kind> <config.json>
    robust-ctrl eval <checkpoint> <config.json>
    robust-ctrl solve-mdp <mdp.json> [--mode M] [--tau T] [--tol TOL]

Exit codes: 0 success, 2 invalid config or input, 3 runtime failure.
``ROBUST_CTRL_THREADS`` caps the number of seeds trained in parallel.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema

from robust_ctrl import harness
from robust_ctrl import mdp as M
from robust_ctrl.exceptions import ConfigError, DivergenceError, DomainError, PhysicsError, \
    ShapeError, TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _print_rows(rows, columns, out):
    out.write(",".join(columns) + "\n")
    for row in rows:
        out.write(",".join(f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c])
                           for c in columns) + "\n")


def cmd_run(args, out):
    cfg = harness.load_config(args.config)
    doc = harness.run(cfg)
    _print_rows(doc["rows"], harness.RESULT_COLUMNS, out)


def cmd_study(args, out):
    cfg = harness.load_config(args.config)
    doc = harness.study(args.kind, cfg)
    _print_rows(doc["rows"], ("cell",) + harness.RESULT_COLUMNS, out)


def cmd_eval(args, out):
    from robust_ctrl.nn.nets import GaussianPolicy, load_checkpoint

    cfg = harness.load_config(args.config)
    try:
        policy = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    if not isinstance(policy, GaussianPolicy):
        raise ConfigError("checkpoint does not hold a policy")
    rows = harness.evaluate_checkpoint(policy, cfg)
    _print_rows(rows, ("env_index", "perturbation_value", "mean_return", "std_return",
                       "n_eval_episodes"), out)


def cmd_solve_mdp(args, out):
    try:
        doc = json.loads(Path(args.mdp).read_text())
        jsonschema.validate(doc, harness.load_schema("mdp.schema.json"))
        mdp, U = M.mdp_from_dict(doc)
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError, ShapeError, DomainError,
            ValueError) as exc:
        raise ConfigError(f"invalid MDP document {args.mdp}: {exc}") from exc
    reg = M.RegularizationSpec(args.tau)
    res = M.value_iteration(mdp, U, reg, M.as_mode(args.mode), tol=args.tol)
    json.dump({"values": res.values.tolist(), "policy": res.policy.tolist(), "iterations": res.iters,
               "converged": res.converged, "mode": args.mode, "tau": args.tau}, out, indent=2)
    out.write("\n")
    if not res.converged:
        raise TrainingError("value iteration did not converge")


def build_parser():
    p = argparse.ArgumentParser(prog="robust-ctrl",
                                description="Robust and soft-robust control experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate every seed of a config")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("study", help="run one investigative study grid")
    s.add_argument("kind", choices=harness.STUDIES)
    s.add_argument("config")
    s.set_defaults(func=cmd_study)

    e = sub.add_parser("eval", help="evaluate a policy checkpoint on a config's holdout set")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("solve-mdp", help="value iteration on a tabular MDP document")
    m.add_argument("mdp")
    m.add_argument("--mode", choices=[x.value for x in M.Mode], default="robust")
    m.add_argument("--tau", type=float, default=0.0)
    m.add_argument("--tol", type=float, default=1e-8)
    m.set_defaults(func=cmd_solve_mdp)
    return p


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, PhysicsError, DivergenceError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
