"""Worst-case, soft-robust and nominal TD learning for continuous control.

The critic ``Q~`` is trained towards

    r_t + gamma * agg_p [ Q~_target(s'_p, a') - tau * KL(pi_k(.|s'_p) || pi_ref(.|s'_p)) ]

where ``s'_p`` is obtained by resetting uncertainty-set member ``p`` to the
stored simulator state of ``s_t`` and replaying ``a_t``, and ``agg`` is the
minimum (robust), a ``w``-weighted mean (soft-robust) or the nominal member
alone (non-robust).  The reward is always the one observed in the nominal
environment.  With ``tau > 0`` the stored critic is ``Q~``; the regularised
action value is recovered by :func:`full_q`.

Members of the set are anything exposing ``batch_step(states, actions)``
and ``observe(states)``: :class:`~robust_ctrl.envs.EnvModel` or a learned
transition model.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from robust_ctrl import mdp as M
from robust_ctrl.exceptions import ConfigError, DomainError, PhysicsError, TrainingError
from robust_ctrl.nn import autodiff as ad
from robust_ctrl.nn.distributions import kl_np
from robust_ctrl.nn.nets import Adam, GaussianPolicy, QNetwork

log = logging.getLogger(__name__)

Mode = M.Mode


class Objective(str, enum.Enum):
    EXPECTED = "expected"
    ENTROPY_REGULARIZED = "entropy_regularized"


@dataclass
class RobustnessSpec:
    """How the continuation value is aggregated over the uncertainty set.

    ``models`` lists the set members; ``nominal_index`` points at the one the
    agent acts in.  ``weights`` defaults to uniform; ``tau`` only matters for
    the entropy-regularised objective.
    """

    mode: Mode = Mode.NON_ROBUST
    objective: Objective = Objective.EXPECTED
    tau: float = 0.0
    weights: np.ndarray | None = None
    models: list = field(default_factory=list)
    nominal_index: int = 0
    n_next_actions: int = 1

    def __post_init__(self):
        self.mode = M.as_mode(self.mode)
        self.objective = Objective(self.objective)
        if not np.isfinite(self.tau) or self.tau < 0:
            raise DomainError(f"tau must be finite and >= 0, got {self.tau}")
        n = len(self.models)
        if n == 0:
            raise ConfigError("the uncertainty set needs at least one model")
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (n,) or np.any(self.weights < 0) or abs(self.weights.sum() - 1) > 1e-12:
            raise DomainError("weights must be a probability vector with one entry per model")
        if not 0 <= self.nominal_index < n:
            raise ConfigError("nominal_index out of range")
        if self.n_next_actions < 1:
            raise ConfigError("n_next_actions must be >= 1")

    @property
    def effective_tau(self):
        return self.tau if self.objective is Objective.ENTROPY_REGULARIZED else 0.0


# -- replay ----------------------------------------------------------------------

@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    env_state: np.ndarray
    source: int = 0


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    state: np.ndarray
    source: np.ndarray

    def __len__(self):
        return self.obs.shape[0]

    def subset(self, idx):
        return Batch(self.obs[idx], self.act[idx], self.reward[idx], self.next_obs[idx],
                     self.state[idx], self.source[idx])


class ReplayBuffer:
    """Fixed-capacity FIFO store with uniform sampling."""

    def __init__(self, obs_dim, act_dim, state_dim, capacity=1_000_000):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.act = np.zeros((self.capacity, act_dim))
        self.reward = np.zeros(self.capacity)
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.state = np.zeros((self.capacity, state_dim))
        self.source = np.zeros(self.capacity, dtype=np.int64)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add(self, t: Transition):
        self.add_batch(np.atleast_2d(t.s), np.atleast_2d(t.a), np.atleast_1d(t.r),
                       np.atleast_2d(t.s_next), np.atleast_2d(t.env_state), np.atleast_1d(t.source))

    def add_batch(self, obs, act, reward, next_obs, state, source=None):
        n = obs.shape[0]
        if source is None:
            source = np.zeros(n, dtype=np.int64)
        for arr in (obs, act, next_obs, state):
            if not np.all(np.isfinite(arr)):
                raise DomainError("transitions must be finite")
        idx = (self.head + np.arange(n)) % self.capacity
        self.obs[idx], self.act[idx], self.reward[idx] = obs, act, reward
        self.next_obs[idx], self.state[idx], self.source[idx] = next_obs, state, source
        self.head = (self.head + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def batch(self, idx) -> Batch:
        return Batch(self.obs[idx], self.act[idx], self.reward[idx], self.next_obs[idx],
                     self.state[idx], self.source[idx])

    def sample(self, batch_size, rng) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.batch(rng.integers(0, self.size, size=batch_size))


class CriticPair:
    """Online critic plus a target copy refreshed every ``update_period`` updates."""

    def __init__(self, online: QNetwork, update_period=200):
        self.online = online
        self.target = online.copy()
        self.update_period = int(update_period)
        self.updates = 0

    def after_update(self):
        self.updates += 1
        if self.updates % self.update_period == 0:
            self.target.load_from(self.online)


# -- targets -----------------------------------------------------------------------

def policy_kl(pi_k: GaussianPolicy, pi_ref: GaussianPolicy, obs):
    """Per-row ``KL(pi_k(.|s) || pi_ref(.|s))``."""
    mk, sk = pi_k.dist_np(obs)
    mr, sr = pi_ref.dist_np(obs)
    return kl_np(mk, sk, mr, sr)


def next_state_candidates(batch: Batch, models, critic_target: QNetwork, pi_k: GaussianPolicy,
                          pi_ref: GaussianPolicy, tau, noise):
    """Continuation candidates for each model, shape ``(n_models, B)``.

    ``noise`` has shape ``(B, M, act_dim)`` and is shared by every model.
    Rows whose successor is non-finite under a model come back as NaN for
    that model.
    """
    B, M_samples = len(batch), noise.shape[1]
    obs_blocks, rows = [], []
    for p, model in enumerate(models):
        try:
            nxt, _ = model.batch_step(batch.state, batch.act)
        except PhysicsError:
            nxt = np.vstack([_safe_row_step(model, batch.state[i], batch.act[i]) for i in range(B)])
        ok = np.all(np.isfinite(nxt), axis=1)
        if ok.all():
            obs_blocks.append(model.observe(nxt))
            rows.append(np.arange(B))
        elif ok.any():
            obs_blocks.append(model.observe(nxt[ok]))
            rows.append(np.flatnonzero(ok))
        else:
            rows.append(np.arange(0))
    out = np.full((len(models), B), np.nan)
    if not obs_blocks:
        return out
    obs = np.concatenate(obs_blocks, axis=0)
    z = np.concatenate([noise[r] for r in rows], axis=0)
    mean, std = pi_k.dist_np(obs)
    actions = (mean[:, None, :] + std[:, None, :] * z).reshape(-1, mean.shape[1])
    q = critic_target.value_np(np.repeat(obs, M_samples, axis=0), actions)
    cand = q.reshape(-1, M_samples).mean(axis=1)
    if tau > 0:
        ref_mean, ref_std = pi_ref.dist_np(obs)
        cand = cand - tau * kl_np(mean, std, ref_mean, ref_std)
    offset = 0
    for p, r in enumerate(rows):
        out[p, r] = cand[offset:offset + len(r)]
        offset += len(r)
    return out


def _safe_row_step(model, state, action):
    try:
        nxt, _ = model.batch_step(state[None], action[None])
        return nxt[0]
    except PhysicsError:
        return np.full(state.shape, np.nan)


def aggregate(candidates, spec: RobustnessSpec):
    if spec.mode is Mode.ROBUST:
        return candidates.min(axis=0)
    if spec.mode is Mode.SOFT_ROBUST:
        return np.tensordot(spec.weights, candidates, axes=1)
    return candidates[0]


def _models_for_mode(spec: RobustnessSpec):
    if spec.mode is Mode.NON_ROBUST:
        return [spec.models[spec.nominal_index]]
    return spec.models


def td_target(batch: Batch, critic: CriticPair, pi_k, pi_ref, spec: RobustnessSpec, gamma,
              noise=None, rng=None, per_source=False):
    """One TD target per transition; NaN marks transitions to skip.

    ``per_source=True`` evaluates each transition only under the model that
    generated it (``batch.source``), as used by domain randomisation.
    """
    if noise is None:
        noise = rng.standard_normal((len(batch), spec.n_next_actions, pi_k.act_dim))
    tau = spec.effective_tau
    if per_source:
        cont = np.full(len(batch), np.nan)
        for e in np.unique(batch.source):
            idx = batch.source == e
            cand = next_state_candidates(batch.subset(idx), [spec.models[e]], critic.target,
                                         pi_k, pi_ref, tau, noise[idx])
            cont[idx] = cand[0]
    else:
        cand = next_state_candidates(batch, _models_for_mode(spec), critic.target, pi_k,
                                     pi_ref, tau, noise)
        cont = aggregate(cand, spec)
    target = batch.reward + gamma * cont
    bad = ~np.isfinite(target)
    if np.any(bad):
        log.warning("skipping %d transitions whose successor diverged", int(bad.sum()))
    return target


def critic_loss_tensor(critic: CriticPair, batch: Batch, target, per_source=False):
    """Mean squared TD error; with ``per_source`` the mean is taken per
    generating environment and then averaged over environments."""
    ok = np.isfinite(target)
    q = critic.online(batch.obs[ok], batch.act[ok])
    err = ad.square(q - target[ok])
    if not per_source:
        return err.mean()
    src = batch.source[ok]
    envs = np.unique(src)
    total = None
    for e in envs:
        term = err[src == e].mean()
        total = term if total is None else total + term
    return total * (1.0 / len(envs))


def critic_update(batch: Batch, critic: CriticPair, pi_k, pi_ref, spec: RobustnessSpec,
                  optimizer: Adam, gamma, noise=None, rng=None, per_source=False):
    """One gradient step on the critic; returns the pre-step loss."""
    target = td_target(batch, critic, pi_k, pi_ref, spec, gamma, noise=noise, rng=rng,
                       per_source=per_source)
    if not np.any(np.isfinite(target)):
        raise TrainingError("every transition in the batch diverged")
    loss = critic_loss_tensor(critic, batch, target, per_source)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError(
            f"critic loss is {value} after {critic.updates} updates; "
            f"target range [{np.nanmin(target)}, {np.nanmax(target)}]")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    critic.after_update()
    return value


def full_q(critic: QNetwork, pi_k, pi_ref, obs, act, tau):
    """Regularised action value ``Q = Q~ - tau * KL(pi_k(.|s) || pi_ref(.|s))``."""
    q_tilde = critic.value_np(obs, act)
    if tau == 0:
        return q_tilde
    return q_tilde - tau * policy_kl(pi_k, pi_ref, np.atleast_2d(obs))


# -- tabular harness -------------------------------------------------------------

@dataclass
class TabularTDReport:
    q: np.ndarray
    values: np.ndarray
    exact_values: np.ndarray
    value_gap: float
    q_gap: float
    gaps: list
    n_samples: int


def tabular_td_equivalence_harness(mdp: M.TabularMDP, U: M.UncertaintySet, pi,
                                   reg: M.RegularizationSpec = M.NO_REG, mode=Mode.ROBUST,
                                   n_samples=200_000, seed=0, sampled_next=False,
                                   step_exponent=0.6, report_every=10_000):
    """Lookup-table TD with the robust target, compared to the exact fixed point.

    Each sample draws ``(s, a)`` uniformly and moves ``Q~(s, a)`` towards
    ``r(s, a) + gamma * agg_p E_{s'~p}[V(s')]`` with
    ``V(s') = sum_a' pi(a'|s') Q~(s', a') - tau KL(s')``, using step size
    ``(1 + n(s, a)) ** -step_exponent``.  With ``sampled_next`` the
    expectation is replaced by one sampled successor per model; that is an
    unbiased target only for a singleton set or the soft-robust mode (where
    the model itself is drawn from ``w``).
    """
    mode = M.as_mode(mode)
    pi = M.check_policy(pi, mdp.n_states, mdp.n_actions)
    ref = reg.reference_for(mdp.n_states, mdp.n_actions)
    kl = M.policy_kl(pi, ref) if reg.tau > 0 else np.zeros(mdp.n_states)
    exact = M.policy_evaluate_exact(mdp, U, pi, reg, mode, tol=1e-12)
    exact_q = mdp.reward + mdp.discount * M.continuation(exact, U, mode)
    rng = np.random.default_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    Q = np.zeros((S, A))
    counts = np.zeros((S, A))
    kernels = U.kernels
    gaps = []
    states = rng.integers(0, S, n_samples)
    actions = rng.integers(0, A, n_samples)
    for n in range(n_samples):
        s, a = states[n], actions[n]
        V = np.sum(pi * Q, axis=1) - reg.tau * kl
        if sampled_next:
            if mode is Mode.SOFT_ROBUST:
                p = rng.choice(len(U), p=U.weights)
                cont = V[rng.choice(S, p=kernels[p, s, a])]
            else:
                nxt = [V[rng.choice(S, p=kernels[p, s, a])] for p in range(len(U))]
                cont = min(nxt) if mode is Mode.ROBUST else nxt[0]
        else:
            per_model = kernels[:, s, a, :] @ V
            if mode is Mode.ROBUST:
                cont = per_model.min()
            elif mode is Mode.SOFT_ROBUST:
                cont = U.weights @ per_model
            else:
                cont = per_model[0]
        counts[s, a] += 1
        step = (1.0 + counts[s, a]) ** -step_exponent
        Q[s, a] += step * (mdp.reward[s, a] + mdp.discount * cont - Q[s, a])
        if (n + 1) % report_every == 0:
            gaps.append(float(np.max(np.abs(np.sum(pi * Q, axis=1) - reg.tau * kl - exact))))
    values = np.sum(pi * Q, axis=1) - reg.tau * kl
    return TabularTDReport(Q, values, exact, float(np.max(np.abs(values - exact))),
                           float(np.max(np.abs(Q - exact_q))), gaps, n_samples)

