"""Diagonal-Gaussian utilities, differentiable and plain-numpy variants."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigError

LOG_STD_MIN = -10.0
LOG_STD_MAX = 5.0


class DiagGaussian:
    """Diagonal Gaussian over rows: mean and log-std of shape (batch, dim).

    log_std is clamped to [-10, 5] at construction.
    """

    def __init__(self, mean, log_std):
        self.mean = ad.as_var(mean)
        self.log_std = ad.clip(ad.as_var(log_std), LOG_STD_MIN, LOG_STD_MAX)
        if self.mean.data.shape != self.log_std.data.shape:
            raise ConfigError(
                f"mean/log_std shape mismatch: {self.mean.data.shape} vs "
                f"{self.log_std.data.shape}")

    @property
    def dim(self) -> int:
        return self.mean.data.shape[-1]


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Var:
    """KL(q || p) per row, summed over dimensions. Shape (batch,).

    The variance ratio is computed as exp(2*(log_std_q - log_std_p)) so that
    identical inputs cancel exactly and KL(q, q) == 0 bit for bit.
    """
    if q.dim != p.dim:
        raise ConfigError(f"KL dimension mismatch: {q.dim} vs {p.dim}")
    log_ratio = q.log_std - p.log_std
    delta = q.mean - p.mean
    terms = (ad.exp(log_ratio * 2.0) * 0.5 - log_ratio
             + ad.square(delta) * ad.exp(p.log_std * -2.0) * 0.5 - 0.5)
    return ad.vsum(terms, axis=-1)


def reparam_sample(q: DiagGaussian, noise: np.ndarray) -> Var:
    """z = mean + exp(log_std) * noise; gradients flow into mean and log_std."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != q.mean.data.shape:
        raise ConfigError(f"noise shape {noise.shape} != mean shape {q.mean.data.shape}")
    return q.mean + ad.exp(q.log_std) * noise


# -- plain-numpy closed forms (retrieval, metrics) ---------------------------


def kl_numpy(mean_q, log_std_q, mean_p, log_std_p) -> np.ndarray:
    """Row-wise KL(q || p), summed over the last axis. Same form as gaussian_kl."""
    mean_q, log_std_q = np.asarray(mean_q), np.asarray(log_std_q)
    mean_p, log_std_p = np.asarray(mean_p), np.asarray(log_std_p)
    log_ratio = log_std_q - log_std_p
    delta = mean_q - mean_p
    terms = (np.exp(2.0 * log_ratio) * 0.5 - log_ratio
             + delta * delta * np.exp(-2.0 * log_std_p) * 0.5 - 0.5)
    return terms.sum(axis=-1)
