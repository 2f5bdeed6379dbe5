"""The shared acting / evaluation / improvement loop.

Agents always act in the nominal environment (or, for domain
randomisation, in a training environment drawn per episode).  ``n_envs``
copies run in lockstep so each policy forward pass serves several episodes.
Every ``steps_per_round`` transitions a learning round runs:
``critic_updates_per_round`` critic steps against the robust target, then one
call to the policy improver.  The policy evaluated by the critic is the
snapshot ``pi_k`` taken after the previous round; the reference policy of
the entropy penalty is the snapshot before that.

Independent random streams (initialisation, action noise, resets, replay
sampling, TD noise, improvement noise, environment draws) are spawned from
the run seed, so the stream consumed by one component never depends on the
robustness mode of another.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from robust_ctrl.envs import EnvSet, batch_step, observe, sample_initial
from robust_ctrl.exceptions import PhysicsError, TrainingError
from robust_ctrl.nn.nets import Adam, GaussianPolicy, QNetwork, save_checkpoint
from robust_ctrl.policy_eval import CriticPair, ReplayBuffer, RobustnessSpec, critic_update

METRIC_COLUMNS = ("episode", "nominal_return", "critic_loss", "eta", "kl_mu", "kl_sigma", "wall_ms")


@dataclass
class TrainingResult:
    policy: GaussianPolicy
    critic: CriticPair
    metrics: list = field(default_factory=list)
    env_draws: list = field(default_factory=list)

    def __iter__(self):
        # unpacks as (policy, metrics)
        return iter((self.policy, self.metrics))


def write_metrics(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _build_improver(kind, cfg, policy):
    if kind == "mpo":
        from robust_ctrl.mpo import MpoImprover

        return MpoImprover(cfg, policy)
    if kind == "svg":
        from robust_ctrl.svg import SvgImprover

        return SvgImprover(cfg, policy)
    raise ValueError(f"unknown improver {kind!r}")


def _build_policy(kind, obs_dim, act_dim, cfg, rng):
    if kind == "svg":
        return GaussianPolicy(obs_dim, act_dim, cfg.policy_hidden, min_variance=cfg.min_variance,
                              tanh_on_mean=cfg.tanh_on_mean, init_std=cfg.init_std, rng=rng)
    return GaussianPolicy(obs_dim, act_dim, cfg.policy_hidden, init_std=cfg.init_std, rng=rng)


def run_training(env_set: EnvSet, spec: RobustnessSpec, cfg, episodes, seed, improver="mpo",
                 metrics_path=None, domain_randomization=False, callback=None,
                 checkpoint_dir=None) -> TrainingResult:
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(7)]
    rng_init, rng_act, rng_reset, rng_replay, rng_td, rng_improve, rng_env = streams
    params = env_set.nominal.params
    obs_dim, act_dim, state_dim = params.obs_dim, params.act_dim, params.state_dim
    models = list(env_set.training_set)
    if domain_randomization:
        acting = models
    else:
        acting = [env_set.nominal]

    policy = _build_policy(improver, obs_dim, act_dim, cfg, rng_init)
    # the environment clips actions to [-1, 1], so the critic sees them clipped too
    critic = CriticPair(QNetwork(obs_dim, act_dim, cfg.critic_hidden, action_limit=1.0,
                                 rng=rng_init), cfg.target_period)
    critic_opt = Adam(critic.online.parameters(), lr=cfg.lr)
    agent = _build_improver(improver, cfg, policy)
    pi_k, pi_ref = policy.copy(), policy.copy()
    buffer = ReplayBuffer(obs_dim, act_dim, state_dim, cfg.replay_capacity)
    result = TrainingResult(policy, critic)

    stats = {"critic_loss": float("nan"), "eta": float("nan"), "kl_mu": float("nan"),
             "kl_sigma": float("nan")}
    done, pending = 0, 0
    try:
        while done < episodes:
            n = min(cfg.n_envs, episodes - done)
            t0 = time.perf_counter()
            if domain_randomization:
                source = rng_env.integers(0, len(acting), n)
            else:
                source = np.zeros(n, dtype=np.int64)
            result.env_draws.extend(int(i) for i in source)
            states = sample_initial(params, rng_reset, n)
            returns = np.zeros(n)
            groups = [(e, np.flatnonzero(source == e)) for e in np.unique(source)]
            for _ in range(params.episode_length):
                obs = observe(params.domain, states)
                mean, std = policy.dist_np(obs)
                actions = mean + std * rng_act.standard_normal(mean.shape)
                nxt = np.empty_like(states)
                rewards = np.empty(n)
                for e, idx in groups:
                    if len(idx) == n:
                        nxt, rewards = batch_step(acting[e].params, states, actions)
                    else:
                        nxt[idx], rewards[idx] = batch_step(acting[e].params, states[idx], actions[idx])
                buffer.add_batch(obs, actions, rewards, observe(params.domain, nxt), states,
                                 source if domain_randomization else None)
                returns += rewards
                states = nxt
                pending += n
                while pending >= cfg.steps_per_round:
                    pending -= cfg.steps_per_round
                    if len(buffer) < cfg.warmup_steps:
                        continue
                    losses = [critic_update(buffer.sample(cfg.batch_size, rng_replay), critic, pi_k,
                                            pi_ref, spec, critic_opt, cfg.discount, rng=rng_td,
                                            per_source=domain_randomization)
                              for _ in range(cfg.critic_updates_per_round)]
                    stats["critic_loss"] = float(np.mean(losses))
                    K = buffer.sample(cfg.policy_batch_size, rng_replay).obs
                    stats.update(agent.improve(K, critic.online, pi_k, rng_improve))
                    pi_ref.load_from(pi_k)
                    pi_k.load_from(policy)
            wall_ms = (time.perf_counter() - t0) * 1000.0 / n
            for i in range(n):
                row = {"episode": done + i, "nominal_return": float(returns[i]), **stats,
                       "wall_ms": wall_ms}
                result.metrics.append({k: row[k] for k in METRIC_COLUMNS})
            done += n
            if callback is not None:
                callback(done, result)
    except (PhysicsError, TrainingError, FloatingPointError) as exc:
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / "aborted_policy.ckpt", policy,
                            extra={"episodes_done": done, "error": str(exc)})
        if metrics_path is not None:
            write_metrics(metrics_path, result.metrics)
        raise TrainingError(f"training aborted after {done} episodes: {exc}") from exc
    if metrics_path is not None:
        write_metrics(metrics_path, result.metrics)
    return result


def deterministic_metrics(rows):
    """Metrics rows without the wall-clock column, for reproducibility checks."""
    return [{k: v for k, v in row.items() if k != "wall_ms"} for row in rows]
