"""Pendulum and cart-pole simulators with perturbable physical parameters.

Angles are measured from upright (``theta = 0`` is the pole pointing up).
Integration is semi-implicit Euler: velocities are advanced with the
accelerations at the current configuration, then positions with the new
velocities.  One control step applies ``frame_skip`` such substeps with the
action held fixed.

All dynamics go through :func:`batch_step`, which advances a batch of raw
simulator states under one parameter set.  :class:`EnvModel` is a thin
stateful wrapper over a single row.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from robust_ctrl.exceptions import ConfigError, DomainError, PhysicsError, ShapeError

DOMAINS = ("pendulum_swingup", "cartpole_balance", "cartpole_swingup")

# default perturbed parameter per domain
PERTURBED = {
    "pendulum_swingup": "ball_mass",
    "cartpole_balance": "pole_length",
    "cartpole_swingup": "pole_length",
}

STATE_DIM = {"pendulum_swingup": 2, "cartpole_balance": 4, "cartpole_swingup": 4}
OBS_DIM = {"pendulum_swingup": 3, "cartpole_balance": 5, "cartpole_swingup": 5}
# index of the pole angle inside the raw state
ANGLE_INDEX = {"pendulum_swingup": 0, "cartpole_balance": 1, "cartpole_swingup": 1}


@dataclass(frozen=True)
class EnvParams:
    domain: str
    pole_length: float = 0.5
    ball_mass: float = 1.0
    cart_mass: float = 1.0
    gravity: float = 9.81
    dt: float = 0.01
    frame_skip: int = 2
    actuator_limit: float = 1.0
    episode_length: int = 500

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        for name in ("pole_length", "ball_mass", "cart_mass", "gravity", "actuator_limit"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise DomainError(f"{name} must be positive and finite, got {v}")
        if not (0 < self.dt <= 0.05):
            raise DomainError(f"dt must lie in (0, 0.05], got {self.dt}")
        if self.frame_skip < 1 or self.episode_length < 1:
            raise DomainError("frame_skip and episode_length must be >= 1")

    @property
    def state_dim(self):
        return STATE_DIM[self.domain]

    @property
    def obs_dim(self):
        return OBS_DIM[self.domain]

    @property
    def act_dim(self):
        return 1


def default_params(domain, **overrides) -> EnvParams:
    """Nominal physical constants for ``domain``.

    Pendulum: 0.5 m massless rod, 1 kg point mass, 1 N m torque limit, so
    the motor cannot hold the pole horizontal and must pump energy.
    Cart-pole: 1 kg cart, 0.1 kg uniform pole of 1 m, 10 N force limit.
    """
    if domain == "pendulum_swingup":
        base = dict(pole_length=0.5, ball_mass=1.0, actuator_limit=1.0)
    elif domain in ("cartpole_balance", "cartpole_swingup"):
        base = dict(pole_length=1.0, ball_mass=0.1, cart_mass=1.0, actuator_limit=10.0)
    else:
        raise ConfigError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    base.update(overrides)
    return EnvParams(domain=domain, **base)


def wrap_angle(theta):
    """Map angles to (-pi, pi]; values already in range are returned unchanged."""
    theta = np.asarray(theta, dtype=float)
    inside = (theta > -np.pi) & (theta <= np.pi)
    wrapped = theta - 2.0 * np.pi * np.ceil((theta - np.pi) / (2.0 * np.pi))
    return np.where(inside, theta, wrapped)


# -- dynamics ------------------------------------------------------------------

def _sin(theta):
    """sin for angles in (-pi, pi], exactly zero at both 0 and pi."""
    far = np.abs(theta) > 0.5 * np.pi
    flipped = np.where(theta > 0, np.sin(np.pi - theta), -np.sin(np.pi + theta))
    return np.where(far, flipped, np.sin(theta))


def _pendulum_accel(p: EnvParams, q, qd, u):
    theta = q[:, 0]
    return ((p.gravity / p.pole_length) * _sin(theta)
            + u / (p.ball_mass * p.pole_length ** 2))[:, None]


def _cartpole_accel(p: EnvParams, q, qd, u):
    # uniform pole of full length L: pivot-to-centre distance L/2
    theta, theta_dot = q[:, 1], qd[:, 1]
    mp, mc, half = p.ball_mass, p.cart_mass, 0.5 * p.pole_length
    total = mp + mc
    sin, cos = _sin(theta), np.cos(theta)
    tmp = (u + mp * half * theta_dot ** 2 * sin) / total
    theta_acc = (p.gravity * sin - cos * tmp) / (half * (4.0 / 3.0 - mp * cos ** 2 / total))
    x_acc = tmp - mp * half * theta_acc * cos / total
    return np.stack([x_acc, theta_acc], axis=1)


_ACCEL = {
    "pendulum_swingup": _pendulum_accel,
    "cartpole_balance": _cartpole_accel,
    "cartpole_swingup": _cartpole_accel,
}


def _tolerance(x, margin):
    """1 at x = 0, decaying smoothly to 0.1 at |x| = margin."""
    return 1.0 / (1.0 + 9.0 * (x / margin) ** 2)


def reward_fn(p: EnvParams, states, actions):
    """Per-step reward in [0, 1] for a batch of (post-step) raw states."""
    states = np.atleast_2d(states)
    a = np.clip(np.atleast_2d(actions)[:, 0], -1.0, 1.0)
    if p.domain == "pendulum_swingup":
        # 1 inside 0.1 rad of upright, then a squared raised cosine to 0 at the bottom
        dist = np.maximum(np.abs(wrap_angle(states[:, 0])) - 0.1, 0.0)
        return ((1.0 + np.cos(dist * np.pi / (np.pi - 0.1))) / 2.0) ** 2
    x, theta, x_dot, theta_dot = states.T
    upright = (np.cos(theta) + 1.0) / 2.0
    centred = (1.0 + _tolerance(x, 2.0)) / 2.0
    small_control = (4.0 + _tolerance(a, 1.0)) / 5.0
    if p.domain == "cartpole_balance":
        return upright * centred * small_control
    small_velocity = (1.0 + _tolerance(theta_dot, 5.0)) / 2.0
    return upright * centred * small_control * small_velocity


def batch_step(p: EnvParams, states, actions):
    """Advance a batch of raw states by one control step.

    Parameters
    ----------
    p : EnvParams
    states : (B, state_dim) array
    actions : (B, 1) array in normalised units; clipped to [-1, 1].

    Returns
    -------
    next_states : (B, state_dim) array with the pole angle wrapped
    rewards : (B,) array
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[1] != p.state_dim:
        raise ShapeError(f"states must have shape (B, {p.state_dim}), got {states.shape}")
    actions = np.asarray(actions, dtype=float).reshape(states.shape[0], -1)
    if not np.all(np.isfinite(actions)):
        raise DomainError("non-finite action")
    u = np.clip(actions[:, 0], -1.0, 1.0) * p.actuator_limit
    n = p.state_dim // 2
    q, qd = states[:, :n].copy(), states[:, n:].copy()
    accel = _ACCEL[p.domain]
    # overflow surfaces as the PhysicsError below
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(p.frame_skip):
            qd = qd + p.dt * accel(p, q, qd, u)
            q = q + p.dt * qd
        ai = ANGLE_INDEX[p.domain]
        q[:, ai] = wrap_angle(q[:, ai])
    nxt = np.concatenate([q, qd], axis=1)
    if not np.all(np.isfinite(nxt)):
        raise PhysicsError(f"non-finite state after integrating {p.domain}")
    return nxt, reward_fn(p, nxt, actions)


def observe(domain, states):
    """Observation map: angles encoded as (cos, sin)."""
    states = np.atleast_2d(states)
    if domain == "pendulum_swingup":
        th, thd = states[:, 0], states[:, 1]
        return np.stack([np.cos(th), np.sin(th), thd], axis=1)
    x, th, xd, thd = states.T
    return np.stack([x, np.cos(th), np.sin(th), xd, thd], axis=1)


def sample_initial(p: EnvParams, rng, n=1):
    """Draw ``n`` initial raw states from the domain's start distribution."""
    if p.domain == "pendulum_swingup":
        theta = wrap_angle(np.pi - rng.uniform(0.0, 2.0 * np.pi, n))
        return np.stack([theta, np.zeros(n)], axis=1)
    x = rng.uniform(-0.1, 0.1, n)
    if p.domain == "cartpole_balance":
        theta = rng.uniform(-0.05, 0.05, n)
    else:
        theta = wrap_angle(np.pi + rng.uniform(-0.05, 0.05, n))
    return np.stack([x, theta, np.zeros(n), np.zeros(n)], axis=1)


def mechanical_energy(p: EnvParams, states):
    """Total energy with the potential zero at the lowest pole position."""
    states = np.atleast_2d(states)
    if p.domain == "pendulum_swingup":
        th, thd = states[:, 0], states[:, 1]
        m, l = p.ball_mass, p.pole_length
        return 0.5 * m * l * l * thd ** 2 + m * p.gravity * l * (1.0 + np.cos(th))
    x, th, xd, thd = states.T
    mp, mc, half = p.ball_mass, p.cart_mass, 0.5 * p.pole_length
    kinetic = (0.5 * (mc + mp) * xd ** 2 + mp * half * xd * thd * np.cos(th)
               + 0.5 * mp * (4.0 / 3.0) * half ** 2 * thd ** 2)
    return kinetic + mp * p.gravity * half * (1.0 + np.cos(th))


def pendulum_shadow_energy(p: EnvParams, states):
    """First-order modified energy conserved by the pendulum integrator.

    Semi-implicit Euler with substep ``h`` conserves
    ``E - (h / 2) * theta_dot * dV/dtheta`` to second order in ``h`` rather
    than ``E`` itself, so this is the quantity whose drift isolates
    integration error from the method's bounded energy oscillation.
    """
    states = np.atleast_2d(states)
    th, thd = states[:, 0], states[:, 1]
    dV = -p.ball_mass * p.gravity * p.pole_length * np.sin(th)
    return mechanical_energy(p, states) - 0.5 * p.dt * thd * dV


# -- stateful wrappers -----------------------------------------------------------

@dataclass
class EnvState:
    """Raw simulator state plus the step counter."""

    values: np.ndarray
    step_count: int = 0

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if self.values.ndim != 1 or not np.all(np.isfinite(self.values)):
            raise DomainError("state must be a finite 1-D vector")

    def __eq__(self, other):
        return (isinstance(other, EnvState) and self.step_count == other.step_count
                and np.array_equal(self.values, other.values))


class EnvModel:
    """One simulator instance; an element of an uncertainty or holdout set."""

    def __init__(self, params: EnvParams, seed=0):
        self.params = params
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._x = np.zeros(params.state_dim)
        self._t = 0

    def __repr__(self):
        name = PERTURBED[self.params.domain]
        return f"EnvModel({self.params.domain}, {name}={getattr(self.params, name)})"

    @property
    def domain(self):
        return self.params.domain

    def get_state(self) -> EnvState:
        return EnvState(self._x.copy(), self._t)

    def set_state(self, s):
        if not isinstance(s, EnvState):
            s = EnvState(s)
        if s.values.shape != (self.params.state_dim,):
            raise ShapeError(f"state must have shape ({self.params.state_dim},)")
        x = s.values.copy()
        ai = ANGLE_INDEX[self.domain]
        x[ai] = wrap_angle(x[ai])
        self._x, self._t = x, int(s.step_count)

    def observation(self):
        return observe(self.domain, self._x)[0]

    def reset(self, rng=None):
        rng = self.rng if rng is None else rng
        self._x = sample_initial(self.params, rng)[0]
        self._t = 0
        return self.observation()

    def step(self, action):
        """Apply ``action``; returns ``(observation, reward)``."""
        nxt, r = self.batch_step(self._x[None, :], np.reshape(action, (1, -1)))
        self._x = nxt[0]
        self._t += 1
        return self.observation(), float(r[0])

    @property
    def done(self):
        return self._t >= self.params.episode_length

    def clone(self):
        return copy.deepcopy(self)

    def batch_step(self, states, actions):
        return batch_step(self.params, states, actions)

    def observe(self, states):
        return observe(self.domain, states)

    def reward(self, states, actions):
        return reward_fn(self.params, states, actions)


class VectorEnv:
    """``n`` independent copies of one model stepped in lockstep.

    Every copy starts and ends its episode together, so one call to
    :meth:`step` advances ``n`` episodes by one step.
    """

    def __init__(self, params: EnvParams, n, rng):
        self.params, self.n, self.rng = params, int(n), rng
        self.states = np.zeros((self.n, params.state_dim))
        self.t = 0

    def reset(self):
        self.states = sample_initial(self.params, self.rng, self.n)
        self.t = 0
        return observe(self.params.domain, self.states)

    def step(self, actions):
        self.states, r = batch_step(self.params, self.states, actions)
        self.t += 1
        return observe(self.params.domain, self.states), r

    @property
    def done(self):
        return self.t >= self.params.episode_length


@dataclass
class EnvSet:
    nominal: EnvModel
    training_set: list
    holdout_set: list
    parameter: str = ""
    training_values: tuple = field(default_factory=tuple)
    holdout_values: tuple = field(default_factory=tuple)

    @property
    def domain(self):
        return self.nominal.domain


def make_env_set(domain, training_values, holdout_values, *, nominal="min", parameter=None,
                 seed=0, **overrides) -> EnvSet:
    """One model per perturbation value of the domain's perturbed parameter.

    ``nominal`` picks the acting environment among the training values:
    ``"min"`` (default), ``"median"`` or ``"max"``.
    """
    if domain not in DOMAINS:
        raise ConfigError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    training_values = tuple(float(v) for v in training_values)
    holdout_values = tuple(float(v) for v in holdout_values)
    if not training_values or not holdout_values:
        raise ConfigError("training and holdout value lists must be nonempty")
    if min(training_values + holdout_values) <= 0:
        raise ConfigError("perturbation values must be positive")
    parameter = parameter or PERTURBED[domain]
    if parameter not in ("pole_length", "ball_mass", "cart_mass"):
        raise ConfigError(f"cannot perturb {parameter!r}")
    base = default_params(domain, **overrides)

    def build(v, k):
        return EnvModel(replace(base, **{parameter: v}), seed=seed + k)

    training = [build(v, k) for k, v in enumerate(training_values)]
    holdout = [build(v, 100 + k) for k, v in enumerate(holdout_values)]
    order = np.argsort(training_values, kind="stable")
    pick = {"min": order[0], "median": order[(len(order) - 1) // 2], "max": order[-1]}
    if nominal not in pick:
        raise ConfigError(f"nominal must be min, median or max, got {nominal!r}")
    return EnvSet(training[pick[nominal]], training, holdout, parameter,
                  training_values, holdout_values)


# -- scripted controllers ---------------------------------------------------------

def energy_pumping_controller(p: EnvParams, gain=5.0, capture=0.35, kp=10.0, kd=2.0):
    """Swing-up by energy shaping, then PD stabilisation near upright.

    Returns a function mapping raw pendulum states ``(B, 2)`` to normalised
    actions ``(B, 1)``.
    """
    target = 2.0 * p.ball_mass * p.gravity * p.pole_length

    def act(states):
        states = np.atleast_2d(states)
        th, thd = states[:, 0], states[:, 1]
        err = target - mechanical_energy(p, states)
        pump = np.clip(gain * err * np.sign(thd + 1e-9), -1.0, 1.0)
        hold = np.clip(-(kp * th + kd * thd) * p.ball_mass * p.pole_length ** 2
                       / p.actuator_limit * 4.0, -1.0, 1.0)
        return np.where(np.abs(th) < capture, hold, pump)[:, None]

    return act


def bang_bang_controller(p: EnvParams):
    """Full torque in the direction that moves energy toward the upright level."""
    target = 2.0 * p.ball_mass * p.gravity * p.pole_length

    def act(states):
        states = np.atleast_2d(states)
        err = target - mechanical_energy(p, states)
        return np.where(err * (states[:, 1] + 1e-9) >= 0, 1.0, -1.0)[:, None]

    return act


def rollout_controller(p: EnvParams, controller, start, steps=None):
    """Return of a raw-state controller from a fixed start state."""
    steps = p.episode_length if steps is None else steps
    x = np.atleast_2d(np.asarray(start, dtype=float))
    total = np.zeros(x.shape[0])
    for _ in range(steps):
        x, r = batch_step(p, x, controller(x))
        total += r
    return total
