"""Numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors every function
with the same signature and must agree to rounding.
"""
import numpy as np


def crps_values(members, truth, fair):
    """Pointwise ensemble CRPS.

    members has shape (N, M), truth shape (M,). Returns shape (M,).
    """
    x = np.asarray(members, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    n = x.shape[0]
    skill = np.abs(x - y[None, :]).mean(axis=0)
    xs = np.sort(x, axis=0)
    k = np.arange(1, n + 1, dtype=np.float64)[:, None]
    pair_sum = 2.0 * ((2.0 * k - n - 1.0) * xs).sum(axis=0)
    denom = 2.0 * n * (n - 1) if fair else 2.0 * n * n
    return skill - pair_sum / denom


def crps_values_grad(members, truth, fair):
    """Pointwise CRPS and its gradient with respect to every member.

    Uses the subgradient sign(0) = 0 at kinks. Returns (values (M,), grad (N, M)).
    """
    x = np.asarray(members, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    n = x.shape[0]
    kappa = 1.0 / (n * (n - 1)) if fair else 1.0 / (n * n)
    diff = x[:, None, :] - x[None, :, :]
    pair = np.abs(diff).sum(axis=(0, 1))
    values = np.abs(x - y[None, :]).mean(axis=0) - 0.5 * kappa * pair
    grad = np.sign(x - y[None, :]) / n - kappa * np.sign(diff).sum(axis=1)
    return values, grad


def local_extrema(field, find_max, periodic_lon):
    """Mask of cells that are <= (or >=) all 8 neighbours and strictly beyond one.

    Neighbours outside the grid are ignored; longitude wraps when periodic_lon.
    """
    f = np.asarray(field, dtype=np.float64)
    if find_max:
        f = -f
    h, w = f.shape
    pad = np.full((h + 2, w + 2), np.inf)
    pad[1:-1, 1:-1] = f
    if periodic_lon:
        pad[1:-1, 0] = f[:, -1]
        pad[1:-1, -1] = f[:, 0]
    not_above = np.ones((h, w), dtype=bool)
    some_below = np.zeros((h, w), dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = pad[1 + di:h + 1 + di, 1 + dj:w + 1 + dj]
            not_above &= f <= nb
            some_below |= (f < nb) & np.isfinite(nb)
    return not_above & some_below


def _l96_tendency(x, forcing):
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + forcing


def l96_rk4(state, forcing, dt, steps):
    """Integrate a batch of Lorenz-96 rings with classic RK4.

    state has shape (B, K); returns the trajectory with shape (steps + 1, B, K).
    """
    x = np.array(state, dtype=np.float64)
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    for s in range(steps):
        k1 = _l96_tendency(x, forcing)
        k2 = _l96_tendency(x + 0.5 * dt * k1, forcing)
        k3 = _l96_tendency(x + 0.5 * dt * k2, forcing)
        k4 = _l96_tendency(x + dt * k3, forcing)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[s + 1] = x
    return out
