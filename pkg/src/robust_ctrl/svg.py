"""Entropy-regularised stochastic value gradients with a zero-step model.

The policy ascends ``E_s[ Q(s, mu(s) + sigma(s) * zeta) ] + alpha * E_s[H(pi(.|s))]``
with ``zeta ~ N(0, I)``: the action is a differentiable function of the
policy parameters, so the critic's action gradient flows straight into the
policy.  The critic is trained by the same robust TD loop as MPO.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from robust_ctrl.exceptions import TrainingError
from robust_ctrl.mpo import MpoConfig
from robust_ctrl.nn import autodiff as ad
from robust_ctrl.nn import distributions as D
from robust_ctrl.nn.nets import Adam, GaussianPolicy, QNetwork


@dataclass
class SvgConfig(MpoConfig):
    """Training-loop settings shared with MPO plus the SVG policy head.

    The MPO-specific trust-region fields are ignored.
    """

    alpha: float = 1e-3
    min_variance: float = 0.1
    tanh_on_mean: bool = True

    def __post_init__(self):
        super().__post_init__()
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")


def svg_objective(states, policy: GaussianPolicy, critic: QNetwork, alpha, noise):
    """The reparameterised objective as a tensor (to be maximised)."""
    dist = policy.dist(states)
    actions = D.sample(dist, noise)
    value = critic(states, actions).mean()
    if alpha == 0:
        return value
    return value + D.entropy(dist).mean() * alpha


def svg_policy_gradient(states, policy: GaussianPolicy, critic: QNetwork, alpha, noise):
    """Flat ascent direction for the policy parameters (critic held fixed)."""
    obj = svg_objective(states, policy, critic, alpha, noise)
    g = ad.grad(obj, policy.parameters())
    for p in critic.parameters():
        p.grad = None
    if not np.all(np.isfinite(g)):
        raise TrainingError("non-finite policy gradient")
    return g


class SvgImprover:
    def __init__(self, cfg: SvgConfig, policy: GaussianPolicy):
        self.cfg = cfg
        self.policy = policy
        self.optimizer = Adam(policy.parameters(), lr=cfg.lr)

    def improve(self, states, critic, pi_k, rng):
        params = self.policy.parameters()
        for _ in range(self.cfg.policy_updates_per_round):
            noise = rng.standard_normal((states.shape[0], self.policy.act_dim))
            g = svg_policy_gradient(states, self.policy, critic, self.cfg.alpha, noise)
            offset, grads = 0, []
            for p in params:
                grads.append(-g[offset:offset + p.data.size].reshape(p.shape))
                offset += p.data.size
            self.optimizer.step(grads)
        new_mean, new_std = self.policy.dist_np(states)
        old_mean, old_std = pi_k.dist_np(states)
        ratio = (new_std / old_std) ** 2
        return {
            "eta": float("nan"),
            "kl_mu": float(np.mean(0.5 * np.sum(((new_mean - old_mean) / old_std) ** 2, axis=-1))),
            "kl_sigma": float(np.mean(0.5 * np.sum(ratio - 1.0 - np.log(ratio), axis=-1))),
        }


def train_svg(env_set, spec, cfg: SvgConfig, episodes, seed, metrics_path=None, callback=None):
    """Same collection and robust critic as MPO, with SVG(0) policy steps."""
    from robust_ctrl.agent import run_training

    return run_training(env_set, spec, cfg, episodes, seed, improver="svg",
                        metrics_path=metrics_path, callback=callback)
