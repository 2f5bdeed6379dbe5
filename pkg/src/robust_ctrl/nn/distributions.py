"""Diagonal Gaussians: log-density, reparameterised sampling, entropy, KL.

All functions accept either numpy arrays or :class:`Tensor` values for the
mean and standard deviation and return tensors, so they can sit inside a
loss graph.  Batches are rows: ``mean`` and ``std`` have shape ``(B, d)``
(or ``(d,)`` for a single distribution).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from robust_ctrl.exceptions import DomainError
from robust_ctrl.nn import autodiff as ad

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class DiagGaussian:
    mean: object
    std: object

    def __post_init__(self):
        self.mean = ad.as_tensor(self.mean)
        self.std = ad.as_tensor(self.std)
        if self.mean.shape != self.std.shape:
            raise DomainError(f"mean {self.mean.shape} and std {self.std.shape} differ in shape")
        if not np.all(np.isfinite(self.std.data)) or np.any(self.std.data <= 0):
            raise DomainError("standard deviations must be positive and finite")

    @property
    def dim(self):
        return self.mean.shape[-1]

    def detach(self):
        return DiagGaussian(self.mean.data.copy(), self.std.data.copy())


def log_prob(dist: DiagGaussian, x):
    """Sum over the last axis of the per-coordinate normal log-density."""
    z = (ad.as_tensor(x) - dist.mean) / dist.std
    per = ad.square(z) * -0.5 - ad.log(dist.std) - 0.5 * _LOG_2PI
    return per.sum(axis=-1)


def sample(dist: DiagGaussian, noise):
    """Reparameterised draw ``mean + std * noise``."""
    return dist.mean + dist.std * ad.as_tensor(noise)


def entropy(dist: DiagGaussian):
    """``0.5 * log((2 pi e)^d |Sigma|)`` per distribution."""
    return (ad.log(dist.std) + 0.5 * (_LOG_2PI + 1.0)).sum(axis=-1)


def kl_mean(p: DiagGaussian, q: DiagGaussian):
    """Mean part of ``KL(p || q)``: ``0.5 (mu_q - mu_p)^T Sigma_q^{-1} (mu_q - mu_p)``."""
    diff = (p.mean - q.mean) / q.std
    return (ad.square(diff) * 0.5).sum(axis=-1)


def kl_cov(p: DiagGaussian, q: DiagGaussian):
    """Covariance part of ``KL(p || q)``: ``0.5 (tr(Sq^-1 Sp) - d + log|Sq|/|Sp|)``."""
    ratio = ad.square(p.std / q.std)
    return ((ratio - 1.0 - ad.log(ratio)) * 0.5).sum(axis=-1)


def kl(p: DiagGaussian, q: DiagGaussian):
    """``KL(p || q)``; equals ``kl_mean(p, q) + kl_cov(p, q)``."""
    return kl_mean(p, q) + kl_cov(p, q)


def kl_np(mean_p, std_p, mean_q, std_q):
    """Closed-form ``KL(p || q)`` on plain arrays (no tape)."""
    ratio = (std_p / std_q) ** 2
    return 0.5 * np.sum(((mean_p - mean_q) / std_q) ** 2 + ratio - 1.0 - np.log(ratio), axis=-1)
