"""Tabular robust MDPs.

Fixed-policy and optimal Bellman operators for three ways of aggregating
the continuation value over a finite, (s,a)-rectangular uncertainty set:

* ``robust``       -- minimum over kernels, chosen independently per (s, a)
* ``soft_robust``  -- expectation under the average kernel ``sum_i w_i P_i``
* ``non_robust``   -- kernel 0 only

Every operator optionally carries a relative-entropy penalty
``tau * KL(pi(.|s) || pi_ref(.|s))``; ``tau = 0`` gives back the plain operator.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from robust_ctrl.exceptions import DivergenceError, DomainError, ShapeError

_ROW_TOL = 1e-12


class Mode(str, enum.Enum):
    ROBUST = "robust"
    SOFT_ROBUST = "soft_robust"
    NON_ROBUST = "non_robust"


def as_mode(mode) -> Mode:
    try:
        return Mode(mode)
    except ValueError:
        raise ValueError(f"unknown robustness mode {mode!r}") from None


@dataclass(frozen=True)
class TabularMDP:
    """Rewards ``reward[s, a]`` and discount ``gamma`` in (0, 1)."""

    reward: np.ndarray
    discount: float

    def __post_init__(self):
        r = np.array(self.reward, dtype=float)
        if r.ndim != 2:
            raise ShapeError(f"reward must be 2-D (states, actions), got shape {r.shape}")
        if not np.all(np.isfinite(r)):
            raise DomainError("rewards must be finite")
        if not 0.0 < self.discount < 1.0:
            raise DomainError(f"discount must lie in (0, 1), got {self.discount}")
        r.setflags(write=False)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]


@dataclass(frozen=True)
class UncertaintySet:
    """A finite list of transition kernels ``kernels[i, s, a, s']``.

    ``weights`` is the distribution over kernels used by the soft-robust
    operator; it defaults to uniform.
    """

    kernels: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        k = np.array(self.kernels, dtype=float)
        if k.ndim == 3:
            k = k[None]
        if k.ndim != 4 or k.shape[0] == 0 or k.shape[1] != k.shape[3]:
            raise ShapeError(f"kernels must have shape (n_kernels, S, A, S), got {k.shape}")
        if np.any(k < 0) or np.any(np.abs(k.sum(axis=-1) - 1.0) > _ROW_TOL):
            raise DomainError("every kernel row must be a probability vector")
        if self.weights is None:
            w = np.full(k.shape[0], 1.0 / k.shape[0])
        else:
            w = np.array(self.weights, dtype=float).reshape(-1)
        if w.shape != (k.shape[0],):
            raise ShapeError(f"need one weight per kernel ({k.shape[0]}), got {w.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > _ROW_TOL:
            raise DomainError("kernel weights must form a probability vector")
        k.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "kernels", k)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.kernels.shape[0]

    @property
    def average_kernel(self) -> np.ndarray:
        return np.tensordot(self.weights, self.kernels, axes=1)


@dataclass(frozen=True)
class RegularizationSpec:
    """Temperature ``tau`` and reference policy (``None`` means uniform)."""

    tau: float = 0.0
    reference: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.tau) or self.tau < 0:
            raise DomainError(f"tau must be finite and >= 0, got {self.tau}")

    def reference_for(self, n_states, n_actions):
        if self.reference is None:
            return np.full((n_states, n_actions), 1.0 / n_actions)
        ref = np.asarray(self.reference, dtype=float)
        if ref.shape != (n_states, n_actions):
            raise ShapeError(f"reference policy shape {ref.shape} != {(n_states, n_actions)}")
        return ref


NO_REG = RegularizationSpec()


def check_policy(pi, n_states, n_actions):
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (n_states, n_actions):
        raise ShapeError(f"policy shape {pi.shape} != {(n_states, n_actions)}")
    if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > _ROW_TOL):
        raise DomainError("policy rows must be probability vectors")
    return pi


def _check(V, mdp, U):
    V = np.asarray(V, dtype=float)
    if V.shape != (mdp.n_states,):
        raise ShapeError(f"value vector has shape {V.shape}, expected ({mdp.n_states},)")
    if U.kernels.shape[1:] != (mdp.n_states, mdp.n_actions, mdp.n_states):
        raise ShapeError(
            f"kernels {U.kernels.shape[1:]} do not match MDP "
            f"({mdp.n_states}, {mdp.n_actions}, {mdp.n_states})"
        )
    return V


def policy_kl(pi, ref):
    """Per-state ``KL(pi || ref)`` with the convention ``0 log(0/q) = 0``."""
    pi = np.asarray(pi, dtype=float)
    ref = np.asarray(ref, dtype=float)
    support = pi > 0
    if np.any(support & (ref <= 0)):
        raise DivergenceError("policy puts mass on an action the reference excludes")
    ratio = np.where(support, pi, 1.0) / np.where(support, ref, 1.0)
    return np.sum(np.where(support, pi * np.log(ratio), 0.0), axis=1)


def continuation(V, U: UncertaintySet, mode) -> np.ndarray:
    """``agg_p E_{s'~p(.|s,a)} V(s')`` as an (S, A) table."""
    mode = as_mode(mode)
    expected = U.kernels @ V  # (n_kernels, S, A)
    if mode is Mode.ROBUST:
        return expected.min(axis=0)
    if mode is Mode.SOFT_ROBUST:
        return np.tensordot(U.weights, expected, axes=1)
    return expected[0]


def bellman_apply(V, mdp: TabularMDP, U: UncertaintySet, pi, reg: RegularizationSpec = NO_REG,
                  mode=Mode.ROBUST) -> np.ndarray:
    """Fixed-policy operator ``T^pi V``."""
    V = _check(V, mdp, U)
    pi = check_policy(pi, mdp.n_states, mdp.n_actions)
    q = mdp.reward + mdp.discount * continuation(V, U, mode)
    out = np.sum(pi * q, axis=1)
    if reg.tau > 0:
        out = out - reg.tau * policy_kl(pi, reg.reference_for(mdp.n_states, mdp.n_actions))
    else:
        # still validate support so tau=0 and tau>0 reject the same inputs
        policy_kl(pi, reg.reference_for(mdp.n_states, mdp.n_actions))
    return out


def greedy(q, reg: RegularizationSpec, n_states, n_actions):
    """Maximise ``E_pi[q] - tau KL(pi || ref)`` per state.

    Returns ``(value, policy)``.  For ``tau = 0`` the policy is the
    deterministic argmax with ties going to the lowest action index; for
    ``tau > 0`` it is the Gibbs policy ``ref * exp(q / tau)`` normalised, and
    the value is the corresponding log-sum-exp.
    """
    if reg.tau == 0:
        best = np.argmax(q, axis=1)
        policy = np.zeros_like(q)
        policy[np.arange(n_states), best] = 1.0
        return q[np.arange(n_states), best], policy
    ref = reg.reference_for(n_states, n_actions)
    with np.errstate(divide="ignore"):
        logits = np.log(ref) + q / reg.tau
    shift = logits.max(axis=1, keepdims=True)
    z = np.exp(logits - shift)
    total = z.sum(axis=1, keepdims=True)
    value = reg.tau * (np.log(total[:, 0]) + shift[:, 0])
    return value, z / total


def optimal_bellman_apply(V, mdp: TabularMDP, U: UncertaintySet, reg: RegularizationSpec = NO_REG,
                          mode=Mode.ROBUST):
    """Optimal operator ``sup_pi T^pi V`` and an attaining policy."""
    V = _check(V, mdp, U)
    q = mdp.reward + mdp.discount * continuation(V, U, mode)
    return greedy(q, reg, mdp.n_states, mdp.n_actions)


class VIResult(NamedTuple):
    values: np.ndarray
    policy: np.ndarray
    iters: int
    residuals: list
    converged: bool


def value_iteration(mdp, U, reg: RegularizationSpec = NO_REG, mode=Mode.ROBUST, tol=1e-8,
                    max_iters=100_000, V0=None) -> VIResult:
    """Iterate the optimal operator until the sup-norm residual is at most ``tol``.

    ``policy`` is greedy with respect to the returned values' predecessor
    (the policy produced by the final sweep).  Hitting ``max_iters`` returns
    with ``converged=False`` rather than raising.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    V = np.zeros(mdp.n_states) if V0 is None else np.array(V0, dtype=float)
    residuals = []
    policy = None
    for it in range(1, max_iters + 1):
        V_new, policy = optimal_bellman_apply(V, mdp, U, reg, mode)
        res = float(np.max(np.abs(V_new - V)))
        residuals.append(res)
        V = V_new
        if res <= tol:
            return VIResult(V, policy, it, residuals, True)
    return VIResult(V, policy, max_iters, residuals, False)


def policy_evaluate_exact(mdp, U, pi, reg: RegularizationSpec = NO_REG, mode=Mode.ROBUST,
                          tol=1e-8, max_iters=100_000, V0=None) -> np.ndarray:
    """Fixed point of ``T^pi`` by successive approximation."""
    if tol <= 0:
        raise DomainError("tol must be positive")
    pi = check_policy(pi, mdp.n_states, mdp.n_actions)
    V = np.zeros(mdp.n_states) if V0 is None else np.array(V0, dtype=float)
    for _ in range(max_iters):
        V_new = bellman_apply(V, mdp, U, pi, reg, mode)
        done = np.max(np.abs(V_new - V)) <= tol
        V = V_new
        if done:
            break
    return V


def vi_error_bound(epsilon_approx, gamma, N, init_gap) -> float:
    """Suboptimality bound of the greedy policy after ``N`` approximate sweeps.

    ``2 gamma eps / (1-gamma)^2 + 2 gamma^(N+1) / (1-gamma) * init_gap``
    """
    if not 0.0 < gamma < 1.0:
        raise DomainError(f"gamma must lie in (0, 1), got {gamma}")
    if epsilon_approx < 0 or init_gap < 0 or N < 0:
        raise DomainError("epsilon_approx, N and init_gap must be non-negative")
    return (2.0 * gamma * epsilon_approx / (1.0 - gamma) ** 2
            + 2.0 * gamma ** (N + 1) / (1.0 - gamma) * init_gap)


# -- random instances and JSON I/O -------------------------------------------

def random_mdp(rng, n_states, n_actions, n_kernels, discount, reward_scale=1.0, weights=None):
    """Random MDP with Dirichlet kernels; returns ``(mdp, U)``."""
    reward = rng.uniform(-reward_scale, reward_scale, size=(n_states, n_actions))
    kernels = rng.dirichlet(np.ones(n_states), size=(n_kernels, n_states, n_actions))
    # renormalise so rows sum to 1 within the 1e-12 invariant
    kernels /= kernels.sum(axis=-1, keepdims=True)
    return TabularMDP(reward, discount), UncertaintySet(kernels, weights)


def random_policy(rng, n_states, n_actions):
    pi = rng.dirichlet(np.ones(n_actions), size=n_states)
    return pi / pi.sum(axis=1, keepdims=True)


def save_mdp(path, mdp: TabularMDP, U: UncertaintySet):
    doc = {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "discount": mdp.discount,
        "reward": mdp.reward.tolist(),
        "kernels": U.kernels.tolist(),
        "weights": U.weights.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def mdp_from_dict(doc):
    mdp = TabularMDP(np.array(doc["reward"], dtype=float), doc["discount"])
    U = UncertaintySet(np.array(doc["kernels"], dtype=float), doc.get("weights"))
    if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
        raise ShapeError("declared n_states / n_actions disagree with the reward table")
    _check(np.zeros(mdp.n_states), mdp, U)
    return mdp, U


def load_mdp(path):
    return mdp_from_dict(json.loads(Path(path).read_text()))
