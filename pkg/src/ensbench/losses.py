"""Training objectives: ensemble CRPS, diagonal-Gaussian KL, their sum and the L1 variant.

All losses are means over every entry (and member), so the KL weight does
not depend on grid size. Gradients use sign(0) = 0 at kinks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

LOG_VAR_MIN = -12.0
LOG_VAR_MAX = 12.0
DEFAULT_LAMBDA = 1e-4


class LossError(ValueError):
    pass


@dataclass
class GaussianLatent:
    """Elementwise mean and log-variance; log_var is clamped to [-12, 12]."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.clip(np.asarray(self.log_var, dtype=np.float64), LOG_VAR_MIN, LOG_VAR_MAX)
        if self.mu.shape != self.log_var.shape:
            raise LossError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ in shape")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.log_var))):
            raise LossError("latent contains non-finite entries")

    @property
    def shape(self):
        return self.mu.shape

    @property
    def std(self):
        return np.exp(0.5 * self.log_var)


@dataclass
class LossValue:
    total: float
    crps_term: float
    kl_term: float
    lam: float


def crps_loss_grad(members, target, estimator="fair"):
    """Mean pointwise CRPS over entries and its gradient with respect to members.

    members: (N, ...) ensemble; target: matching (...). Returns (loss, grad like members).
    """
    x = np.asarray(members, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape[1:] != y.shape:
        raise LossError(f"members {x.shape} do not match target {y.shape}")
    n = x.shape[0]
    if estimator not in ("fair", "empirical"):
        raise LossError(f"unknown CRPS estimator {estimator!r}")
    if estimator == "fair" and n < 2:
        raise LossError("fair CRPS needs at least 2 members")
    m = y.size
    values, grad = kernels.crps_values_grad(x.reshape(n, m), y.ravel(), estimator == "fair")
    return float(values.mean()), grad.reshape(x.shape) / m


def _kl_elementwise(mu_a, lv_a, mu_b, lv_b):
    """KL(a || b) per entry and gradients wrt (mu_a, lv_a, mu_b, lv_b)."""
    var_a, var_b = np.exp(lv_a), np.exp(lv_b)
    diff = mu_a - mu_b
    kl = 0.5 * (lv_b - lv_a) + (var_a + diff ** 2) / (2.0 * var_b) - 0.5
    g_mu_a = diff / var_b
    g_lv_a = 0.5 * var_a / var_b - 0.5
    g_lv_b = 0.5 - (var_a + diff ** 2) / (2.0 * var_b)
    return kl, g_mu_a, g_lv_a, -g_mu_a, g_lv_b


def gaussian_kl_grad(q: GaussianLatent, p: GaussianLatent, direction="q||p"):
    """Mean elementwise KL divergence between diagonal Gaussians.

    The default ``q||p`` lets the teacher distribution q supervise p.
    Returns (loss, {"mu_q", "log_var_q", "mu_p", "log_var_p"} gradients).
    """
    if q.shape != p.shape:
        raise LossError(f"latent shapes differ: {q.shape} vs {p.shape}")
    m = q.mu.size
    if direction == "q||p":
        kl, gmq, glq, gmp, glp = _kl_elementwise(q.mu, q.log_var, p.mu, p.log_var)
    elif direction == "p||q":
        kl, gmp, glp, gmq, glq = _kl_elementwise(p.mu, p.log_var, q.mu, q.log_var)
    else:
        raise LossError(f"unknown KL direction {direction!r}")
    grads = {"mu_q": gmq / m, "log_var_q": glq / m, "mu_p": gmp / m, "log_var_p": glp / m}
    return float(kl.mean()), grads


def _kl_total(crps_value, crps_grad, q, p, lam, direction):
    if lam < 0:
        raise LossError(f"lambda must be non-negative, got {lam}")
    kl, kl_grads = gaussian_kl_grad(q, p, direction)
    grads = {"ensemble": crps_grad}
    grads.update({k: lam * v for k, v in kl_grads.items()})
    return LossValue(crps_value + lam * kl, crps_value, kl, lam), grads


def combined_loss(ensemble, target, q, p, lam=DEFAULT_LAMBDA, estimator="fair", direction="q||p"):
    """CRPS of the ensemble plus lam times KL(q || p); returns (LossValue, gradients)."""
    crps_value, grad = crps_loss_grad(ensemble, target, estimator)
    return _kl_total(crps_value, grad, q, p, lam, direction)


def l1_loss_grad(forecast, target):
    """Mean absolute error over every entry; forecast may carry a leading member axis."""
    f = np.asarray(forecast, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    try:
        d = f - t
    except ValueError as exc:
        raise LossError(f"forecast {f.shape} does not broadcast to target {t.shape}") from exc
    if d.shape != f.shape:
        raise LossError(f"forecast {f.shape} does not match target {t.shape}")
    return float(np.abs(d).mean()), np.sign(d) / d.size


def l1_kl_loss(forecast, target, q, p, lam=DEFAULT_LAMBDA, direction="q||p"):
    """L1 in place of CRPS; returns (LossValue, gradients). ``crps_term`` holds the L1 value."""
    value, grad = l1_loss_grad(forecast, target)
    return _kl_total(value, grad, q, p, lam, direction)
