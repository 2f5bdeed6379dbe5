"""Policy improvement by weighted maximum likelihood under KL trust regions.

E-step: for ``K`` states with ``N`` actions sampled from the current policy,
the non-parametric improved policy puts weight ``softmax_i(Q_ij / eta)`` on
sample ``i`` of state ``j``.  The temperature minimises the convex dual

    g(eta) = eta * epsilon + eta * mean_j log mean_i exp(Q_ij / eta),

which makes the average ``KL(q_j || uniform)`` equal to ``epsilon`` when the
constraint binds.

M-step: gradient ascent on ``sum_ij q_ij log pi(a_ij | s_j)`` with
Lagrangian penalties on the batch-average mean and covariance parts of
``KL(pi_new || pi_old)``.  The likelihood is decoupled: the mean is fitted
with the old covariance and the covariance with the old mean.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from robust_ctrl.nn import autodiff as ad
from robust_ctrl.nn import distributions as D
from robust_ctrl.nn.nets import Adam, GaussianPolicy

log = logging.getLogger(__name__)

ETA_BOUNDS = (1e-6, 1e3)


@dataclass
class MpoConfig:
    """Hyperparameters of one training run.

    The learning schedule is one improvement round every
    ``steps_per_round`` environment transitions, each round doing
    ``critic_updates_per_round`` critic steps followed by an E-step and
    ``policy_updates_per_round`` M-step gradient steps.
    """

    epsilon: float = 0.1
    epsilon_mu: float = 0.01
    epsilon_sigma: float = 1e-5
    n_action_samples: int = 15
    discount: float = 0.99
    batch_size: int = 256
    lr: float = 3e-4
    policy_hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)
    replay_capacity: int = 1_000_000
    target_period: int = 200
    steps_per_round: int = 50
    critic_updates_per_round: int = 100
    policy_updates_per_round: int = 1
    policy_batch_size: int = 64
    warmup_steps: int = 1000
    n_envs: int = 1
    init_std: float = 0.3
    dual_lr: float = 0.1
    init_alpha_mu: float = 1.0
    init_alpha_sigma: float = 1.0
    n_next_actions: int = 1

    def __post_init__(self):
        self.policy_hidden = tuple(self.policy_hidden)
        self.critic_hidden = tuple(self.critic_hidden)
        for name in ("epsilon", "epsilon_mu", "epsilon_sigma", "lr", "dual_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.discount < 1:
            raise ValueError("discount must lie in (0, 1)")


# -- E-step ------------------------------------------------------------------------

def temperature_dual(eta, Q, epsilon):
    """``eta * epsilon + eta * mean_j log mean_i exp(Q_ij / eta)``."""
    Q = np.asarray(Q, dtype=float)
    lme = logsumexp(Q / eta, axis=1) - np.log(Q.shape[1])
    return float(eta * epsilon + eta * lme.mean())


def _solve_dual(Q, epsilon, eta_init):
    lo, hi = np.log(ETA_BOUNDS[0]), np.log(ETA_BOUNDS[1])

    def f(x):
        return temperature_dual(np.exp(x), Q, epsilon)

    if eta_init is not None and ETA_BOUNDS[0] < eta_init < ETA_BOUNDS[1]:
        x0 = np.log(eta_init)
        try:
            res = minimize_scalar(f, bracket=(x0 - 0.5, x0 + 0.5), method="brent",
                                  options={"xtol": 1e-10})
            if res.success and lo <= res.x <= hi and np.isfinite(res.fun):
                return float(np.exp(res.x))
        except (ValueError, RuntimeError):
            pass
    res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-9})
    if not np.isfinite(res.fun):
        raise FloatingPointError("temperature dual is not finite")
    return float(np.exp(res.x))


def e_step_weights(Q, epsilon, eta_prev=None):
    """Sample weights ``q_ij`` and temperature ``eta`` for a ``(K, N)`` Q table.

    ``eta_prev`` warm-starts the search and is returned unchanged if the
    dual cannot be minimised.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or not np.all(np.isfinite(Q)):
        raise ValueError("Q must be a finite (K, N) table")
    try:
        eta = _solve_dual(Q, epsilon, eta_prev)
    except (FloatingPointError, ValueError) as exc:
        if eta_prev is None:
            raise
        log.warning("temperature dual failed (%s); keeping eta=%g", exc, eta_prev)
        eta = eta_prev
    z = Q / eta
    z = z - z.max(axis=1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=1, keepdims=True), eta


def sample_kl_to_uniform(weights):
    """Mean over states of ``KL(q_j || uniform over the N samples)``."""
    N = weights.shape[1]
    safe = np.where(weights > 0, weights, 1.0)
    return float(np.mean(np.sum(np.where(weights > 0, weights * np.log(N * safe), 0.0), axis=1)))


# -- M-step ------------------------------------------------------------------------

@dataclass
class WeightedActionSet:
    states: np.ndarray   # (K, obs_dim)
    actions: np.ndarray  # (K, N, act_dim)
    weights: np.ndarray  # (K, N)

    def __post_init__(self):
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(axis=1) - 1) > 1e-9):
            raise ValueError("weights must be nonnegative and sum to one per state")


@dataclass
class Duals:
    """Log-space Lagrange multipliers of the mean and covariance constraints."""

    log_alpha_mu: float = 0.0
    log_alpha_sigma: float = 0.0
    rejected: int = 0

    @property
    def alpha_mu(self):
        return float(np.exp(self.log_alpha_mu))

    @property
    def alpha_sigma(self):
        return float(np.exp(self.log_alpha_sigma))


_LOG_ALPHA_RANGE = (np.log(1e-8), np.log(1e8))


def weighted_log_likelihood(dist: D.DiagGaussian, old: D.DiagGaussian, data: WeightedActionSet,
                            decoupled=True):
    """``(1/K) sum_ij q_ij log pi(a_ij | s_j)`` as a tensor.

    With ``decoupled`` the mean and covariance each enter through their own
    Gaussian, the other factor being held at the old policy's value.
    """
    K, N, d = data.actions.shape
    a = data.actions.reshape(K * N, d)

    def rows(t):
        return ad.reshape(ad.concat([t] * N, axis=-1), (K * N, d)) if isinstance(t, ad.Tensor) \
            else np.repeat(t, N, axis=0)

    w = data.weights.reshape(K * N)
    if decoupled:
        lp_mean = D.log_prob(D.DiagGaussian(rows(dist.mean), rows(old.std.data)), a)
        lp_cov = D.log_prob(D.DiagGaussian(rows(old.mean.data), rows(dist.std)), a)
        lp = lp_mean + lp_cov
    else:
        lp = D.log_prob(D.DiagGaussian(rows(dist.mean), rows(dist.std)), a)
    return (lp * w).sum() * (1.0 / K)


def m_step(data: WeightedActionSet, policy: GaussianPolicy, old: GaussianPolicy, cfg: MpoConfig,
           optimizer: Adam, duals: Duals, n_iters=None, decoupled=True):
    """Fit ``policy`` to the weighted samples in place.

    ``old`` is the policy the samples were drawn from.  Returns a dict of
    diagnostics (final KLs, likelihood trace, whether the step was rejected).
    """
    n_iters = cfg.policy_updates_per_round if n_iters is None else n_iters
    old_mean, old_std = old.dist_np(data.states)
    old_dist = D.DiagGaussian(old_mean, old_std)
    backup = policy.get_flat()
    trace = []
    for _ in range(n_iters):
        dist = policy.dist(data.states)
        ll = weighted_log_likelihood(dist, old_dist, data, decoupled)
        kl_mu = D.kl_mean(dist, old_dist).mean()
        kl_sigma = D.kl_cov(dist, old_dist).mean()
        loss = ll * -1.0 + kl_mu * duals.alpha_mu + kl_sigma * duals.alpha_sigma
        optimizer.zero_grad()
        loss.backward()
        if not all(p.grad is None or np.all(np.isfinite(p.grad)) for p in optimizer.params):
            break
        optimizer.step()
        trace.append(float(ll.data))
        _dual_step(duals, float(kl_mu.data), float(kl_sigma.data), cfg)
    mean, std = policy.dist_np(data.states)
    kl_mu = float(np.mean(0.5 * np.sum(((mean - old_mean) / old_std) ** 2, axis=-1)))
    ratio = (std / old_std) ** 2
    kl_sigma = float(np.mean(0.5 * np.sum(ratio - 1.0 - np.log(ratio), axis=-1)))
    rejected = kl_mu > 10 * cfg.epsilon_mu or kl_sigma > 10 * cfg.epsilon_sigma \
        or not np.all(np.isfinite(policy.get_flat()))
    if rejected:
        policy.set_flat(backup)
        duals.rejected += 1
        if kl_mu > 10 * cfg.epsilon_mu:
            duals.log_alpha_mu = min(duals.log_alpha_mu + np.log(10.0), _LOG_ALPHA_RANGE[1])
        if kl_sigma > 10 * cfg.epsilon_sigma:
            duals.log_alpha_sigma = min(duals.log_alpha_sigma + np.log(10.0), _LOG_ALPHA_RANGE[1])
        kl_mu = kl_sigma = 0.0
    return {"kl_mu": kl_mu, "kl_sigma": kl_sigma, "likelihood": trace, "rejected": rejected}


def _dual_step(duals: Duals, kl_mu, kl_sigma, cfg: MpoConfig):
    # bounded, scale-free step: the two budgets differ by orders of magnitude
    duals.log_alpha_mu = float(np.clip(
        duals.log_alpha_mu + cfg.dual_lr * np.tanh(kl_mu / cfg.epsilon_mu - 1.0), *_LOG_ALPHA_RANGE))
    duals.log_alpha_sigma = float(np.clip(
        duals.log_alpha_sigma + cfg.dual_lr * np.tanh(kl_sigma / cfg.epsilon_sigma - 1.0),
        *_LOG_ALPHA_RANGE))


# -- improvement round -------------------------------------------------------------

@dataclass
class MpoImprover:
    """E-step plus M-step, called once per learning round."""

    cfg: MpoConfig
    policy: GaussianPolicy
    optimizer: Adam = None
    duals: Duals = None
    eta: float = 1.0
    last: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = Adam(self.policy.parameters(), lr=self.cfg.lr)
        if self.duals is None:
            self.duals = Duals(np.log(self.cfg.init_alpha_mu), np.log(self.cfg.init_alpha_sigma))

    def improve(self, states, critic, pi_k: GaussianPolicy, rng):
        K, N = states.shape[0], self.cfg.n_action_samples
        mean, std = pi_k.dist_np(states)
        actions = mean[:, None, :] + std[:, None, :] * rng.standard_normal((K, N, mean.shape[1]))
        # the entropy penalty at s is constant across actions, so Q~ gives the same weights
        Q = critic.value_np(np.repeat(states, N, axis=0), actions.reshape(K * N, -1)).reshape(K, N)
        weights, self.eta = e_step_weights(Q, self.cfg.epsilon, self.eta)
        data = WeightedActionSet(states, actions, weights)
        info = m_step(data, self.policy, pi_k, self.cfg, self.optimizer, self.duals)
        self.last = {"eta": self.eta, "kl_mu": info["kl_mu"], "kl_sigma": info["kl_sigma"]}
        return self.last


def make_policy(obs_dim, act_dim, cfg: MpoConfig, rng):
    return GaussianPolicy(obs_dim, act_dim, cfg.policy_hidden, init_std=cfg.init_std, rng=rng)


def train(env_set, spec, cfg: MpoConfig, episodes, seed, metrics_path=None, callback=None):
    """Acting in the nominal environment, robust policy evaluation and MPO
    improvement.  Returns ``(policy, metrics)``; see :func:`agent.run_training`."""
    from robust_ctrl.agent import run_training

    return run_training(env_set, spec, cfg, episodes, seed, improver="mpo",
                        metrics_path=metrics_path, callback=callback)


def limited_dr_train(env_set, cfg: MpoConfig, episodes, seed, metrics_path=None, tau=0.0,
                     objective="expected"):
    """Non-robust MPO with each episode acted in a uniformly drawn training
    environment and the critic loss averaged per environment."""
    from robust_ctrl.agent import run_training
    from robust_ctrl.policy_eval import RobustnessSpec

    spec = RobustnessSpec("non_robust", objective, tau, models=list(env_set.training_set))
    return run_training(env_set, spec, cfg, episodes, seed, improver="mpo",
                        metrics_path=metrics_path, domain_randomization=True)
