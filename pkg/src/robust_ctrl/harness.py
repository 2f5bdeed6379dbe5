"""Experiment harness: config handling, seeded runs, holdout evaluation, studies.

A run trains one policy per seed, evaluates each with the deterministic
mean action on every holdout environment, and aggregates the per-seed mean
returns into a result table.  Files written under ``output_dir/<name>``::

    results.json, results.csv         aggregate table
    seed_<k>/metrics.csv              per-episode training diagnostics
    seed_<k>/policy.ckpt              final policy
    seed_<k>/eval.json                per-episode evaluation returns

Everything except the ``wall_ms`` metrics column is a deterministic function
of the config.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from robust_ctrl import ddr
from robust_ctrl.agent import run_training
from robust_ctrl.envs import EnvModel, make_env_set, observe, sample_initial
from robust_ctrl.exceptions import ConfigError, PhysicsError, TrainingError
from robust_ctrl.nn.nets import MlpSpec, save_checkpoint
from robust_ctrl.policy_eval import RobustnessSpec
from robust_ctrl.svg import SvgConfig

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("env_index", "perturbation_value", "mean_return", "std_return", "n_seeds",
                  "n_eval_episodes")
STUDIES = ("larger_test_set", "modify_uncertainty", "extra_samples", "limited_dr", "ddr_grid",
           "nominal_choice")

# grids for the investigative studies
LARGER_TEST_SET = {
    "pendulum_swingup": {"parameter": "pole_length", "training_values": [1.0, 1.1, 1.4],
                         "holdout_values": [1.0, 1.1, 1.2, 1.3, 1.4, 1.5]},
    "cartpole_balance": {"parameter": "pole_length", "training_values": [0.5, 1.9, 2.1],
                         "holdout_values": [0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 1.7, 1.9]},
}
MODIFIED_THIRD_VALUE = {"pendulum_swingup": [1.2, 1.3, 2.0], "cartpole_balance": [1.5, 2.5, 3.5]}
OFFLINE_TRAINING_VALUES = {"pendulum_swingup": [1.0, 1.1, 1.2], "cartpole_swingup": [1.0, 1.4, 1.7]}
EXTRA_SAMPLE_BUDGETS = (1, 3)

DEFAULTS = {
    "name": "experiment",
    "algorithm": "mpo",
    "mode": "robust",
    "objective": "entropy_regularized",
    "tau": 1.0,
    "weights": None,
    "n_next_actions": 1,
    "limited_dr": False,
    "parameter": None,
    "nominal": "min",
    "env": {},
    "seeds": [0, 1, 2, 3, 4],
    "n_eval_episodes": 30,
    "eval_seed": 1000,
    "agent": {},
    "ddr": None,
    "output_dir": "runs",
}


def load_schema(name):
    return json.loads(resources.files("robust_ctrl").joinpath("schemas", name).read_text())


def validate_config(raw) -> dict:
    """Schema-check ``raw`` and return it with defaults filled in.

    Raises
    ------
    ConfigError
        With every schema violation listed.
    """
    validator = jsonschema.Draft202012Validator(load_schema("experiment.schema.json"))
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"  at /{'/'.join(map(str, e.absolute_path))}: {e.message}" for e in errors]
        raise ConfigError("invalid experiment config:\n" + "\n".join(lines))
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update(copy.deepcopy(raw))
    if cfg["weights"] is not None and len(cfg["weights"]) != len(cfg["training_values"]):
        raise ConfigError("weights need one entry per training value")
    if cfg["algorithm"] == "svg" and cfg["limited_dr"]:
        raise ConfigError("limited_dr is only defined for mpo")
    try:
        agent_config(cfg)
        env_set_from_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return validate_config(raw)


def agent_config(cfg) -> SvgConfig:
    """Agent hyperparameters; the SVG fields are ignored by MPO."""
    known = {f.name for f in fields(SvgConfig)}
    kw = {k: v for k, v in cfg["agent"].items() if k in known}
    kw.setdefault("n_next_actions", cfg["n_next_actions"])
    return SvgConfig(**kw)


def env_set_from_config(cfg, training_values=None):
    return make_env_set(cfg["domain"], cfg["training_values"] if training_values is None else training_values,
                        cfg["holdout_values"], nominal=cfg["nominal"], parameter=cfg["parameter"],
                        **cfg["env"])


def uncertainty_models(cfg, env_set):
    """Ground-truth training models, or learned ones when ``ddr`` is set."""
    if cfg["ddr"] is None:
        return list(env_set.training_set)
    d = cfg["ddr"]
    spec = MlpSpec(1, tuple(d.get("hidden", (64, 64))), 1, layer_norm_first=False)
    models = []
    for i, m in enumerate(env_set.training_set):
        data = ddr.generate_dataset(m, d["dataset_size"], seed=d.get("data_seed", 0) + i)
        models.append(ddr.fit_model(data, spec, epochs=d.get("epochs", 20), seed=i,
                                    lr=d.get("lr", 1e-3), batch_size=d.get("batch_size", 256),
                                    min_updates=d.get("min_updates", 2000)))
    return ddr.ddr_uncertainty_set(models)


def robustness_spec(cfg, models):
    mode = "non_robust" if cfg["limited_dr"] else cfg["mode"]
    return RobustnessSpec(mode, cfg["objective"], cfg["tau"], weights=cfg["weights"], models=models,
                          n_next_actions=cfg["n_next_actions"])


# -- evaluation ---------------------------------------------------------------------

def episode_returns(policy, env: EnvModel, n_episodes, seed):
    """Undiscounted returns of ``n_episodes`` mean-action rollouts."""
    p = env.params
    states = sample_initial(p, np.random.default_rng(seed), n_episodes)
    total = np.zeros(n_episodes)
    for _ in range(p.episode_length):
        action = policy.mean_action(observe(p.domain, states))
        states, r = env.batch_step(states, action)
        total += r
    return total


def eval_policy(policy, env: EnvModel, n_episodes, seed):
    """``(mean, std)`` of deterministic-evaluation returns."""
    returns = episode_returns(policy, env, n_episodes, seed)
    return float(np.mean(returns)), float(np.std(returns))


def holdout_order(env_set):
    """Holdout indices sorted by distance from the nominal value."""
    nominal = getattr(env_set.nominal.params, env_set.parameter)
    vals = env_set.holdout_values
    return sorted(range(len(vals)), key=lambda i: (abs(vals[i] - nominal), vals[i]))


# -- single run ---------------------------------------------------------------------

def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def train_seed(cfg, seed, out_dir=None):
    """Train one seed; returns the :class:`~robust_ctrl.agent.TrainingResult`."""
    env_set = env_set_from_config(cfg)
    spec = robustness_spec(cfg, uncertainty_models(cfg, env_set))
    seed_dir = None if out_dir is None else Path(out_dir) / f"seed_{seed}"
    return run_training(env_set, spec, agent_config(cfg), cfg["episodes"], seed,
                        improver=cfg["algorithm"],
                        metrics_path=None if seed_dir is None else seed_dir / "metrics.csv",
                        domain_randomization=cfg["limited_dr"], checkpoint_dir=seed_dir)


def _run_seed(cfg, seed, out_dir):
    """Worker: train, checkpoint and evaluate one seed.

    Returns ``(seed, per-holdout mean returns, error message or None)``.
    """
    seed_dir = Path(out_dir) / f"seed_{seed}"
    try:
        result = train_seed(cfg, seed, out_dir)
    except TrainingError as exc:
        return seed, None, str(exc)
    save_checkpoint(seed_dir / "policy.ckpt", result.policy, extra={"seed": seed})
    env_set = env_set_from_config(cfg)
    per_env = []
    for k, env in enumerate(env_set.holdout_set):
        try:
            per_env.append(episode_returns(result.policy, env, cfg["n_eval_episodes"],
                                           cfg["eval_seed"] + k).tolist())
        except PhysicsError as exc:
            return seed, None, f"evaluation failed on holdout {k}: {exc}"
    _atomic_write(seed_dir / "eval.json", json.dumps(
        {"holdout_values": list(env_set.holdout_values), "returns": per_env}, sort_keys=True))
    return seed, [float(np.mean(r)) for r in per_env], None


def worker_count(n_jobs):
    raw = os.environ.get("ROBUST_CTRL_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"ROBUST_CTRL_THREADS must be an integer, got {raw!r}") from exc
    return max(1, min(cap, n_jobs))


def result_table(cfg, seed_means):
    """Aggregate ``{seed: per-holdout means}`` into ordered table rows."""
    env_set = env_set_from_config(cfg)
    seeds = sorted(seed_means)
    rows = []
    for rank, k in enumerate(holdout_order(env_set)):
        vals = [seed_means[s][k] for s in seeds]
        rows.append({
            "env_index": rank,
            "perturbation_value": env_set.holdout_values[k],
            "mean_return": float(np.mean(vals)) if vals else float("nan"),
            "std_return": float(np.std(vals)) if vals else 0.0,
            "n_seeds": len(vals),
            "n_eval_episodes": cfg["n_eval_episodes"],
            "seed_means": vals,
        })
    return rows


def write_results(out_dir, cfg, rows, status="complete", error=None, completed=None):
    env_set = env_set_from_config(cfg)
    doc = {
        "format": "robust-ctrl-results",
        "version": 1,
        "status": status,
        "name": cfg["name"],
        "parameter": env_set.parameter,
        "seeds": list(cfg["seeds"]),
        "completed_seeds": sorted(completed if completed is not None else cfg["seeds"]),
        "config": cfg,
        "rows": rows,
    }
    if error is not None:
        doc["error"] = error
    jsonschema.validate(doc, load_schema("results.schema.json"))
    _atomic_write(Path(out_dir) / "results.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for row in rows:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in RESULT_COLUMNS])
    _atomic_write(Path(out_dir) / "results.csv", buf.getvalue())
    return doc


def run(cfg) -> dict:
    """Train and evaluate every seed of ``cfg``; returns the results document.

    Raises
    ------
    TrainingError
        After writing results flagged ``aborted`` if any seed aborted.
    """
    out_dir = Path(cfg["output_dir"]) / cfg["name"]
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(cfg["seeds"])
    n_workers = worker_count(len(seeds))
    if n_workers == 1:
        outcomes = [_run_seed(cfg, s, out_dir) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            outcomes = list(pool.map(_run_seed, [cfg] * len(seeds), seeds, [out_dir] * len(seeds)))
    done = {s: means for s, means, err in outcomes if err is None}
    errors = [f"seed {s}: {err}" for s, _, err in outcomes if err is not None]
    rows = result_table(cfg, done)
    if errors:
        write_results(out_dir, cfg, rows, "aborted", "; ".join(errors), completed=list(done))
        raise TrainingError("; ".join(errors))
    return write_results(out_dir, cfg, rows)


def evaluate_checkpoint(policy, cfg) -> list:
    """Evaluate a loaded policy on the config's holdout set, nominal order."""
    env_set = env_set_from_config(cfg)
    rows = []
    for rank, k in enumerate(holdout_order(env_set)):
        returns = episode_returns(policy, env_set.holdout_set[k], cfg["n_eval_episodes"],
                                  cfg["eval_seed"] + k)
        rows.append({"env_index": rank, "perturbation_value": env_set.holdout_values[k],
                     "mean_return": float(np.mean(returns)), "std_return": float(np.std(returns)),
                     "n_eval_episodes": cfg["n_eval_episodes"]})
    return rows


def comparison_table(results_a, results_b, label_a="a", label_b="b"):
    """Per-holdout comparison of two result documents over shared seeds.

    ``wins`` counts seeds where the first run's mean return is at least
    the second's.
    """
    seeds_a, seeds_b = results_a["completed_seeds"], results_b["completed_seeds"]
    shared = [s for s in seeds_a if s in seeds_b]
    rows = []
    for ra, rb in zip(results_a["rows"], results_b["rows"]):
        if ra["perturbation_value"] != rb["perturbation_value"]:
            raise ValueError("result tables cover different holdout values")
        a = [ra["seed_means"][seeds_a.index(s)] for s in shared]
        b = [rb["seed_means"][seeds_b.index(s)] for s in shared]
        rows.append({
            "env_index": ra["env_index"],
            "perturbation_value": ra["perturbation_value"],
            f"mean_{label_a}": float(np.mean(a)) if a else float("nan"),
            f"mean_{label_b}": float(np.mean(b)) if b else float("nan"),
            "wins": int(sum(x >= y for x, y in zip(a, b))),
            "n_seeds": len(shared),
        })
    return rows


# -- studies --------------------------------------------------------------------------

def _cell(base, name, **changes):
    cfg = copy.deepcopy(base)
    cfg.update(changes)
    cfg["name"] = f"{base['name']}/{name}"
    return cfg


def _arms(base, prefix=""):
    return [_cell(base, f"{prefix}{mode}", mode=mode) for mode in ("robust", "soft_robust", "non_robust")]


def study_cells(kind, base) -> list:
    """Expand ``base`` into the configs of one investigative study."""
    domain = base["domain"]
    if kind == "larger_test_set":
        if domain not in LARGER_TEST_SET:
            raise ConfigError(f"no larger test set defined for {domain}")
        return _arms(_cell(base, "", **LARGER_TEST_SET[domain]) | {"name": base["name"]})
    if kind == "modify_uncertainty":
        if domain not in MODIFIED_THIRD_VALUE or len(base["training_values"]) != 3:
            raise ConfigError("modify_uncertainty needs a supported domain and three training values")
        return [_cell(base, f"third_{v}", training_values=[*base["training_values"][:2], v],
                      mode="robust", weights=None)
                for v in MODIFIED_THIRD_VALUE[domain]]
    if kind == "extra_samples":
        cells = [_cell(base, "robust_x1", mode="robust")]
        cells += [_cell(base, f"non_robust_x{k}", mode="non_robust", episodes=k * base["episodes"])
                  for k in EXTRA_SAMPLE_BUDGETS]
        return cells
    if kind == "limited_dr":
        return [_cell(base, "robust", mode="robust", limited_dr=False),
                _cell(base, "limited_dr", limited_dr=True, algorithm="mpo")]
    if kind == "ddr_grid":
        if domain not in OFFLINE_TRAINING_VALUES:
            raise ConfigError(f"no offline-dataset setting for {domain}")
        vals = OFFLINE_TRAINING_VALUES[domain]
        ref = _cell(base, "ground_truth", mode="robust", training_values=vals, ddr=None, weights=None)
        extra = dict(base["ddr"] or {})
        extra.pop("dataset_size", None)
        return [ref] + [_cell(base, f"n_{n}", mode="robust", training_values=vals, weights=None,
                              ddr={**extra, "dataset_size": n})
                        for n in ddr.SIZE_GRID]
    if kind == "nominal_choice":
        return [c for nominal in ("min", "median", "max")
                for c in _arms(_cell(base, "", nominal=nominal) | {"name": base["name"]},
                               prefix=f"{nominal}_")]
    raise ConfigError(f"unknown study {kind!r}; expected one of {STUDIES}")


def study(kind, base) -> dict:
    """Run every cell of a study; writes ``study.json`` and ``study.csv``."""
    cells = study_cells(kind, base)
    for c in cells:
        validate_config(c)
    combined, errors = [], []
    for c in cells:
        try:
            doc = run(c)
        except TrainingError as exc:
            errors.append(f"{c['name']}: {exc}")
            doc = json.loads((Path(c["output_dir"]) / c["name"] / "results.json").read_text())
        for row in doc["rows"]:
            combined.append({"cell": c["name"].split("/", 1)[1], **row})
    out = {"study": kind, "name": base["name"], "status": "aborted" if errors else "complete",
           "cells": [c["name"] for c in cells], "rows": combined}
    if errors:
        out["error"] = "; ".join(errors)
    out_dir = Path(base["output_dir"]) / base["name"]
    _atomic_write(out_dir / "study.json", json.dumps(out, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("cell",) + RESULT_COLUMNS)
    for row in combined:
        w.writerow([row["cell"]] + [repr(row[c]) if isinstance(row[c], float) else row[c]
                                    for c in RESULT_COLUMNS])
    _atomic_write(out_dir / "study.csv", buf.getvalue())
    if errors:
        raise TrainingError(out["error"])
    return out
