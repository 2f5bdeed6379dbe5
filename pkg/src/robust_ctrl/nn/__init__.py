"""Reverse-mode autodiff, dense networks and Gaussian policy heads."""
from robust_ctrl.nn.autodiff import Tensor, grad, no_grad, parameter
from robust_ctrl.nn.distributions import DiagGaussian, entropy, kl, kl_cov, kl_mean, log_prob, sample
from robust_ctrl.nn.nets import (MLP, Adam, GaussianPolicy, MlpSpec, QNetwork, load_checkpoint,
                                 read_checkpoint, save_checkpoint)

__all__ = [
    "Tensor", "grad", "no_grad", "parameter", "DiagGaussian", "entropy", "kl", "kl_cov",
    "kl_mean", "log_prob", "sample", "MLP", "Adam", "GaussianPolicy", "MlpSpec", "QNetwork",
    "load_checkpoint", "read_checkpoint", "save_checkpoint",
]
