"""Dense networks, the Gaussian policy head, Adam, and checkpoints."""
from __future__ import annotations

import copy
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from robust_ctrl.exceptions import DomainError, ShapeError
from robust_ctrl.nn import autodiff as ad
from robust_ctrl.nn.distributions import DiagGaussian


@dataclass(frozen=True)
class MlpSpec:
    """Layer layout of a feed-forward network.

    ``hidden`` lists the hidden widths.  The first hidden layer can be
    layer-normalised, optionally followed by ``tanh`` in place of the usual
    activation; the remaining hidden layers use ``activation``.
    """

    in_dim: int
    hidden: tuple = (64, 64)
    out_dim: int = 1
    activation: str = "elu"
    layer_norm_first: bool = True
    tanh_after_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        # a network without hidden layers is a plain affine map
        if min(self.hidden, default=1) <= 0 or self.in_dim <= 0 or self.out_dim <= 0 \
                or (not self.hidden and self.layer_norm_first):
            raise DomainError(f"invalid layer widths in {self}")
        if self.activation != "elu":
            raise DomainError(f"unsupported activation {self.activation!r}")

    @property
    def widths(self):
        return (self.in_dim, *self.hidden, self.out_dim)


def init_params(spec: MlpSpec, rng, out_scale=0.1):
    params = OrderedDict()
    widths = spec.widths
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        bound = np.sqrt(3.0 / fan_in)
        if i == len(widths) - 2:
            bound *= out_scale
        params[f"W{i}"] = ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params[f"b{i}"] = ad.parameter(np.zeros(fan_out))
        if i == 0 and spec.layer_norm_first:
            params["ln_gain"] = ad.parameter(np.ones(fan_out))
            params["ln_bias"] = ad.parameter(np.zeros(fan_out))
    return params


def mlp_forward(spec: MlpSpec, params, x):
    x = ad.as_tensor(x)
    if x.data.ndim == 1:
        x = ad.reshape(x, (1, -1))
    if x.shape[-1] != spec.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != {spec.in_dim}")
    if not np.all(np.isfinite(x.data)):
        raise DomainError("non-finite network input")
    n_layers = len(spec.widths) - 1
    h = x
    for i in range(n_layers):
        h = ad.linear(h, params[f"W{i}"], params[f"b{i}"])
        if i == n_layers - 1:
            break
        if i == 0 and spec.layer_norm_first:
            h = ad.layer_norm(h, params["ln_gain"], params["ln_bias"])
            h = ad.tanh(h) if spec.tanh_after_norm else ad.elu(h)
        else:
            h = ad.elu(h)
    return h


class Module:
    """Holds an ordered dict of parameter tensors."""

    params: "OrderedDict[str, ad.Tensor]"

    def parameters(self):
        return list(self.params.values())

    def layout(self):
        out, offset = [], 0
        for name, p in self.params.items():
            out.append({"name": name, "shape": list(p.shape), "offset": offset})
            offset += p.data.size
        return out

    def get_flat(self):
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        n = sum(p.data.size for p in self.params.values())
        if vec.shape != (n,):
            raise ShapeError(f"flat vector has shape {vec.shape}, expected ({n},)")
        offset = 0
        for p in self.params.values():
            size = p.data.size
            p.data = vec[offset:offset + size].reshape(p.shape).copy()
            offset += size

    def copy(self):
        return copy.deepcopy(self)

    def load_from(self, other):
        for name, p in self.params.items():
            p.data = other.params[name].data.copy()


class MLP(Module):
    def __init__(self, spec: MlpSpec, rng=None, out_scale=0.1):
        self.spec = spec
        self.params = init_params(spec, rng or np.random.default_rng(0), out_scale)

    def __call__(self, x):
        return mlp_forward(self.spec, self.params, x)


def _softplus_inv(y):
    return float(np.log(np.expm1(y)))


class GaussianPolicy(Module):
    """Diagonal-Gaussian policy ``N(mu(s), diag(std(s)^2))``.

    The torso emits ``2 * act_dim`` numbers: the mean and the pre-softplus
    diagonal Cholesky factors ``A``.  The variance is ``softplus(A)^2 +
    min_variance``.
    """

    def __init__(self, obs_dim, act_dim, hidden=(64, 64), *, min_variance=0.0,
                 tanh_on_mean=False, init_std=0.3, layer_norm_first=True,
                 tanh_after_norm=True, rng=None):
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        self.min_variance = float(min_variance)
        self.tanh_on_mean = bool(tanh_on_mean)
        self.init_std = float(init_std)
        self.spec = MlpSpec(self.obs_dim, tuple(hidden), 2 * self.act_dim, "elu",
                            layer_norm_first, tanh_after_norm)
        self.params = init_params(self.spec, rng or np.random.default_rng(0))
        target = max(self.init_std ** 2 - self.min_variance, 1e-2)
        bias = self.params[f"b{len(self.spec.hidden)}"].data
        bias[self.act_dim:] = _softplus_inv(np.sqrt(target))

    def config(self):
        return {
            "kind": "gaussian_policy", "obs_dim": self.obs_dim, "act_dim": self.act_dim,
            "hidden": list(self.spec.hidden), "min_variance": self.min_variance,
            "tanh_on_mean": self.tanh_on_mean, "init_std": self.init_std,
            "layer_norm_first": self.spec.layer_norm_first,
            "tanh_after_norm": self.spec.tanh_after_norm,
        }

    def dist(self, obs) -> DiagGaussian:
        out = mlp_forward(self.spec, self.params, obs)
        d = self.act_dim
        mean = out[:, :d]
        if self.tanh_on_mean:
            mean = ad.tanh(mean)
        A = ad.softplus(out[:, d:])
        if self.min_variance > 0:
            std = ad.sqrt(ad.square(A) + self.min_variance)
        else:
            # softplus underflows to exactly 0 below about -745; keep the
            # covariance positive definite
            std = A + 1e-300 if np.any(A.data <= 0) else A
        return DiagGaussian(mean, std)

    def dist_np(self, obs):
        with ad.no_grad():
            d = self.dist(obs)
        return d.mean.data, d.std.data

    def mean_action(self, obs):
        obs = np.asarray(obs, dtype=float)
        mean, _ = self.dist_np(obs)
        return mean[0] if obs.ndim == 1 else mean

    def sample(self, obs, rng):
        mean, std = self.dist_np(obs)
        a = mean + std * rng.standard_normal(mean.shape)
        return a[0] if np.asarray(obs).ndim == 1 else a


class QNetwork(Module):
    """State-action value network ``Q(s, a)`` on the concatenated input.

    With ``action_limit`` set, actions are clamped to ``[-limit, limit]``
    before entering the network, matching what the environment executes.
    """

    def __init__(self, obs_dim, act_dim, hidden=(64, 64), *, layer_norm_first=True,
                 tanh_after_norm=True, action_limit=None, rng=None):
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        self.action_limit = None if action_limit is None else float(action_limit)
        self.spec = MlpSpec(self.obs_dim + self.act_dim, tuple(hidden), 1, "elu",
                            layer_norm_first, tanh_after_norm)
        self.params = init_params(self.spec, rng or np.random.default_rng(0), out_scale=1.0)

    def config(self):
        return {"kind": "q_network", "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "hidden": list(self.spec.hidden),
                "layer_norm_first": self.spec.layer_norm_first,
                "tanh_after_norm": self.spec.tanh_after_norm,
                "action_limit": self.action_limit}

    def __call__(self, obs, act):
        act = ad.as_tensor(np.atleast_2d(act)) if not isinstance(act, ad.Tensor) else act
        if self.action_limit is not None:
            act = ad.clip(act, -self.action_limit, self.action_limit)
        x = ad.concat([ad.as_tensor(np.atleast_2d(obs)) if not isinstance(obs, ad.Tensor) else obs,
                       act], axis=-1)
        out = mlp_forward(self.spec, self.params, x)
        return ad.reshape(out, (-1,))

    def value_np(self, obs, act):
        with ad.no_grad():
            return self(obs, act).data


class Adam:
    """Adaptive-moment optimiser over a list of parameter tensors."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, grads=None):
        """Apply one update from ``grads`` (list) or the tensors' ``.grad``."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad if grads is None else grads[i]
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


# -- checkpoints ---------------------------------------------------------------
# layout: 8-byte little-endian header length, UTF-8 JSON header, then the
# parameters as one little-endian float64 blob in layout order.

def save_checkpoint(path, module: Module, extra=None):
    header = {"spec": module.config(), "layout": module.layout()}
    if extra:
        header["extra"] = extra
    blob = module.get_flat().astype("<f8").tobytes()
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(blob)


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n].decode())
    flat = np.frombuffer(raw[8 + n:], dtype="<f8").astype(float)
    return header, flat


def load_checkpoint(path):
    header, flat = read_checkpoint(path)
    spec = dict(header["spec"])
    kind = spec.pop("kind")
    if kind == "gaussian_policy":
        module = GaussianPolicy(**spec)
    elif kind == "q_network":
        module = QNetwork(**spec)
    elif kind == "mlp":
        module = MLP(MlpSpec(**spec))
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    module.set_flat(flat)
    return module


def _mlp_config(self):
    d = asdict(self.spec)
    d["hidden"] = list(d["hidden"])
    return {"kind": "mlp", **d}


MLP.config = _mlp_config
