"""Data-driven uncertainty sets: offline datasets and learned one-step models.

A dataset is a list of ``(state, action, next_state)`` records in raw
simulator coordinates.  A :class:`LearnedModel` regresses the state change
``next_state - state`` (angle difference wrapped) from the observation
features and the action, and is a drop-in replacement for
:class:`~robust_ctrl.envs.EnvModel` wherever a transition model is consumed.

On disk a dataset is a directory holding ``manifest.json`` and
``records.bin``: ``n`` rows of ``[state, action, next_state]`` as
little-endian float64.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from robust_ctrl.envs import ANGLE_INDEX, EnvModel, EnvParams, batch_step, observe, sample_initial, \
    wrap_angle
from robust_ctrl.exceptions import DomainError, ShapeError
from robust_ctrl.nn import autodiff as ad
from robust_ctrl.nn.nets import MLP, Adam, MlpSpec, read_checkpoint, save_checkpoint

DATASET_FORMAT = "robust-ctrl-dataset"
DATASET_VERSION = 1
SIZE_GRID = (100, 1_000, 10_000, 100_000, 1_000_000)


@dataclass
class OfflineDataset:
    """Transition records; ``params`` is ``None`` for synthetic systems."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    params: EnvParams | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        self.next_states = np.asarray(self.next_states, dtype=float)
        n = len(self.states)
        if self.states.ndim != 2 or self.next_states.shape != self.states.shape:
            raise ShapeError("states and next_states must be matching (n, state_dim) arrays")
        if self.actions.ndim != 2 or len(self.actions) != n:
            raise ShapeError("actions must be an (n, act_dim) array")
        for a in (self.states, self.actions, self.next_states):
            if not np.all(np.isfinite(a)):
                raise DomainError("dataset records must be finite")

    def __len__(self):
        return len(self.states)

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def act_dim(self):
        return self.actions.shape[1]

    def subset(self, idx):
        return OfflineDataset(self.states[idx], self.actions[idx], self.next_states[idx], self.params)


def generate_dataset(model: EnvModel, n, seed, behavior=None, reset_every=None, n_lanes=64):
    """Roll out ``behavior`` in ``model`` until ``n`` transitions are collected.

    Parameters
    ----------
    model : EnvModel
        Source simulator.
    n : int
        Number of records.
    seed : int
        Seeds the start states and the behaviour noise.
    behavior : callable, optional
        ``behavior(observations, rng) -> actions``; uniform random actions
        in [-1, 1] by default.
    reset_every : int, optional
        Episode length between resets; the model's episode length by default.
    n_lanes : int
        Episodes simulated side by side.
    """
    p = model.params
    n = int(n)
    if n < 0:
        raise ValueError("n must be >= 0")
    reset_every = p.episode_length if reset_every is None else int(reset_every)
    rng = np.random.default_rng(seed)
    if behavior is None:
        def behavior(obs, rng):
            return rng.uniform(-1.0, 1.0, (len(obs), p.act_dim))
    lanes = max(1, min(int(n_lanes), n))
    blocks = []
    collected, t = 0, 0
    x = sample_initial(p, rng, lanes)
    while collected < n:
        if t == reset_every:
            x, t = sample_initial(p, rng, lanes), 0
        a = np.asarray(behavior(observe(p.domain, x), rng), dtype=float).reshape(lanes, p.act_dim)
        y, _ = model.batch_step(x, a)
        blocks.append((x, a, y))
        collected += lanes
        x, t = y, t + 1
    if not blocks:
        return OfflineDataset(np.zeros((0, p.state_dim)), np.zeros((0, p.act_dim)),
                              np.zeros((0, p.state_dim)), p)
    s, a, y = (np.concatenate(z)[:n] for z in zip(*blocks))
    return OfflineDataset(s, a, y, p)


def save_dataset(path, data: OfflineDataset, seed=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "n": len(data),
        "state_dim": data.state_dim,
        "act_dim": data.act_dim,
        "dtype": "<f8",
        "record_layout": ["state", "action", "next_state"],
        "blob": "records.bin",
        "params": None if data.params is None else asdict(data.params),
        "seed": seed,
    }
    rows = np.concatenate([data.states, data.actions, data.next_states], axis=1)
    (path / "records.bin").write_bytes(rows.astype("<f8").tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(path) -> OfflineDataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"{path} is not a version-{DATASET_VERSION} dataset")
    sd, ad_, n = manifest["state_dim"], manifest["act_dim"], manifest["n"]
    rows = np.frombuffer((path / manifest["blob"]).read_bytes(), dtype=manifest["dtype"])
    if rows.size != n * (2 * sd + ad_):
        raise ValueError("record blob size does not match the manifest")
    rows = rows.astype(float).reshape(n, 2 * sd + ad_)
    params = None if manifest["params"] is None else EnvParams(**manifest["params"])
    return OfflineDataset(rows[:, :sd], rows[:, sd:sd + ad_], rows[:, sd + ad_:], params)


# -- learned transition models -----------------------------------------------------

def _features(params, states):
    return states if params is None else observe(params.domain, states)


def _delta(params, states, next_states):
    d = next_states - states
    if params is not None:
        ai = ANGLE_INDEX[params.domain]
        d[:, ai] = wrap_angle(d[:, ai])
    return d


class LearnedModel(EnvModel):
    """One-step model ``s' = s + f(features(s), a)`` with normalised inputs/outputs.

    Rewards are the analytic reward of the source domain evaluated at the
    predicted state.
    """

    def __init__(self, net: MLP, params: EnvParams | None, x_mean, x_std, y_mean, y_std,
                 heldout_mse=float("nan")):
        self.net = net
        self.x_mean, self.x_std = np.asarray(x_mean, float), np.asarray(x_std, float)
        self.y_mean, self.y_std = np.asarray(y_mean, float), np.asarray(y_std, float)
        self.heldout_mse = float(heldout_mse)
        self.source_params = params
        if params is not None:
            super().__init__(params)
        else:
            self.params = None
            self._x = np.zeros(len(self.y_mean))
            self._t = 0

    def __repr__(self):
        return f"LearnedModel(heldout_mse={self.heldout_mse:.3g})"

    @property
    def state_dim(self):
        return len(self.y_mean)

    def predict(self, states, actions):
        """Predicted next raw states for a batch."""
        states = np.asarray(states, dtype=float)
        if states.ndim != 2 or states.shape[1] != self.state_dim:
            raise ShapeError(f"states must have shape (B, {self.state_dim})")
        actions = np.asarray(actions, dtype=float).reshape(len(states), -1)
        if self.params is not None:
            actions = np.clip(actions, -1.0, 1.0)
        x = (np.concatenate([_features(self.params, states), actions], axis=1) - self.x_mean) / self.x_std
        with ad.no_grad():
            out = self.net(x).data
        nxt = states + out * self.y_std + self.y_mean
        if self.params is not None:
            ai = ANGLE_INDEX[self.params.domain]
            nxt[:, ai] = wrap_angle(nxt[:, ai])
        return nxt

    def batch_step(self, states, actions):
        nxt = self.predict(states, actions)
        if self.params is None:
            return nxt, np.zeros(len(nxt))
        return nxt, self.reward(nxt, actions)

    def observe(self, states):
        return _features(self.params, np.atleast_2d(states))

    def mse(self, data: OfflineDataset):
        """Mean squared one-step error on ``data`` (angle error wrapped)."""
        err = _delta(self.params, data.next_states, self.predict(data.states, data.actions))
        return float(np.mean(err ** 2))

    def save(self, path):
        extra = {
            "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean.tolist(), "y_std": self.y_std.tolist(),
            "heldout_mse": self.heldout_mse,
            "params": None if self.params is None else asdict(self.params),
        }
        save_checkpoint(path, self.net, extra={"learned_model": extra})

    @classmethod
    def load(cls, path):
        header, flat = read_checkpoint(path)
        spec = dict(header["spec"])
        spec.pop("kind")
        spec["hidden"] = tuple(spec["hidden"])
        net = MLP(MlpSpec(**spec))
        net.set_flat(flat)
        e = header["extra"]["learned_model"]
        params = None if e["params"] is None else EnvParams(**e["params"])
        return cls(net, params, e["x_mean"], e["x_std"], e["y_mean"], e["y_std"], e["heldout_mse"])


DEFAULT_MODEL_SPEC = MlpSpec(in_dim=1, hidden=(64, 64), out_dim=1, activation="elu",
                             layer_norm_first=False)


def fit_model(data: OfflineDataset, spec: MlpSpec = DEFAULT_MODEL_SPEC, epochs=20, seed=0, lr=1e-3,
              batch_size=256, holdout_fraction=0.1, min_updates=0) -> LearnedModel:
    """Regress normalised state changes with Adam on mean squared error.

    ``spec`` supplies the hidden layout; its input and output widths are set
    from the data.  The number of updates is ``epochs`` passes over the
    training split, but at least ``min_updates``.  The learning rate decays
    geometrically to a tenth of ``lr``.  The returned model carries the
    one-step MSE on a ``holdout_fraction`` split of ``data``.
    """
    n = len(data)
    if n < 10:
        raise DomainError("need at least 10 records to fit a model")
    if np.any(np.ptp(data.states, axis=0) == 0):
        raise DomainError("degenerate dataset: a state component never varies")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_hold = max(1, int(round(holdout_fraction * n)))
    hold, train = data.subset(perm[:n_hold]), data.subset(perm[n_hold:])

    X = np.concatenate([_features(data.params, train.states), train.actions], axis=1)
    Y = _delta(data.params, train.states, train.next_states)
    x_mean, x_std = X.mean(axis=0), np.maximum(X.std(axis=0), 1e-8)
    y_mean, y_std = Y.mean(axis=0), np.maximum(Y.std(axis=0), 1e-8)
    X, Y = (X - x_mean) / x_std, (Y - y_mean) / y_std

    spec = replace(spec, in_dim=X.shape[1], out_dim=Y.shape[1])
    net = MLP(spec, rng=rng, out_scale=1.0)
    opt = Adam(net.parameters(), lr=lr)
    m = len(X)
    bs = min(batch_size, m)
    per_epoch = int(np.ceil(m / bs))
    total = max(int(epochs) * per_epoch, int(min_updates))
    decay = 0.1 ** (1.0 / max(total, 1))
    order = rng.permutation(m)
    pos = 0
    for _ in range(total):
        if pos + bs > m:
            order, pos = rng.permutation(m), 0
        idx = order[pos:pos + bs]
        pos += bs
        err = net(X[idx]) - Y[idx]
        loss = (err * err).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        opt.lr *= decay
    model = LearnedModel(net, data.params, x_mean, x_std, y_mean, y_std)
    model.heldout_mse = model.mse(hold)
    return model


def ddr_uncertainty_set(models):
    """The learned models as a list usable wherever ground-truth models are.

    Every member must share the source domain.
    """
    models = list(models)
    if not models:
        raise ValueError("an uncertainty set needs at least one model")
    domains = {None if m.params is None else m.params.domain for m in models}
    if len(domains) != 1:
        raise ValueError("learned models come from different domains")
    return models
