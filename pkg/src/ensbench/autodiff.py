"""Minimal reverse-mode differentiation over a fixed set of array operations.

Each :class:`Var` remembers its parents and the vector-Jacobian product that
maps its gradient back onto them. ``backward`` walks the graph once in
reverse topological order. The op set is exactly what the ensemble model
needs: affine convolutions, pointwise nonlinearities, elementwise
arithmetic, channel concat/slice, and the CRPS / KL / L1 losses.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .losses import LOG_VAR_MAX, LOG_VAR_MIN


class Var:
    __slots__ = ("value", "grad", "_parents", "name")

    def __init__(self, value, parents=(), name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents  # tuple of (Var, vjp)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into every reachable ``Var.grad``."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, vjp in node._parents:
                g = vjp(node.grad)
                parent.grad = g if parent.grad is None else parent.grad + g


def const(value):
    return value if isinstance(value, Var) else Var(value)


def add(a, b):
    a, b = const(a), const(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Var(a.value + b.value, ((a, lambda g: g), (b, lambda g: g)))


def mul(a, b):
    a, b = const(a), const(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return Var(av * bv, ((a, lambda g: g * bv), (b, lambda g: g * av)))


def scale(a, c):
    a = const(a)
    return Var(a.value * c, ((a, lambda g: g * c),))


def exp(a):
    out = np.exp(a.value)
    return Var(out, ((a, lambda g: g * out),))


def tanh(a):
    out = np.tanh(a.value)
    return Var(out, ((a, lambda g: g * (1.0 - out * out)),))


def clip(a, lo, hi):
    """Clamp with zero gradient outside [lo, hi]."""
    inside = (a.value >= lo) & (a.value <= hi)
    return Var(np.clip(a.value, lo, hi), ((a, lambda g: g * inside),))


def concat(parts, axis=1):
    parts = [const(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.value for p in parts], axis=axis)

    def make(lo, hi):
        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]
        return vjp

    return Var(out, tuple((p, make(bounds[i], bounds[i + 1])) for i, p in enumerate(parts)))


def take_channels(a, start, stop):
    """Slice channels [start, stop) on axis 1."""
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return full

    return Var(a.value[:, start:stop], ((a, vjp),))


def mean(a):
    n = a.value.size
    shape = a.shape
    return Var(a.value.mean(), ((a, lambda g: np.full(shape, g / n)),))


def add_scalars(terms, weights=None):
    """Weighted sum of scalar Vars."""
    weights = [1.0] * len(terms) if weights is None else list(weights)
    total = sum(w * t.value for w, t in zip(weights, terms))
    return Var(total, tuple((t, (lambda w: lambda g: g * w)(w)) for t, w in zip(terms, weights)))


# ---------------------------------------------------------------- convolutions

def _pad(x, ph, pw, periodic):
    if ph:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (0, 0)))
    if pw:
        if periodic:
            x = np.concatenate([x[..., -pw:], x, x[..., :pw]], axis=-1)
        else:
            x = np.pad(x, ((0, 0), (0, 0), (0, 0), (pw, pw)))
    return x


def _unpad(g, ph, pw, periodic):
    if pw:
        core = g[..., pw:-pw].copy()
        if periodic:
            core[..., -pw:] += g[..., :pw]
            core[..., :pw] += g[..., -pw:]
        g = core
    if ph:
        g = g[:, :, ph:-ph]
    return g


def conv2d(x, w, b, stride=(1, 1), padding=(0, 0), periodic=True):
    """Cross-correlation of (B, Ci, H, W) with weights (Co, Ci, kh, kw) plus bias (Co,).

    Latitude is zero-padded; longitude wraps when ``periodic``.
    """
    xv, wv = x.value, w.value
    bsz, ci, _, _ = xv.shape
    co, ci2, kh, kw = wv.shape
    if ci != ci2:
        raise ValueError(f"conv2d: input has {ci} channels, weights expect {ci2}")
    sh, sw = stride
    ph, pw = padding
    xp = _pad(xv, ph, pw, periodic)
    hp, wp = xp.shape[2:]
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    cols = np.empty((bsz, ci, kh * kw, ho, wo))
    for a in range(kh):
        for c in range(kw):
            cols[:, :, a * kw + c] = xp[:, :, a:a + sh * (ho - 1) + 1:sh, c:c + sw * (wo - 1) + 1:sw]
    cols = cols.reshape(bsz, ci * kh * kw, ho * wo)
    w2 = wv.reshape(co, ci * kh * kw)
    out = (w2 @ cols).reshape(bsz, co, ho, wo) + b.value[None, :, None, None]

    def vjp_x(g):
        g2 = g.reshape(bsz, co, ho * wo)
        gcols = (w2.T @ g2).reshape(bsz, ci, kh * kw, ho, wo)
        gxp = np.zeros((bsz, ci, hp, wp))
        for a in range(kh):
            for c in range(kw):
                gxp[:, :, a:a + sh * (ho - 1) + 1:sh, c:c + sw * (wo - 1) + 1:sw] += gcols[:, :, a * kw + c]
        return _unpad(gxp, ph, pw, periodic)

    def vjp_w(g):
        g2 = g.reshape(bsz, co, ho * wo)
        return np.einsum("bop,bkp->ok", g2, cols).reshape(wv.shape)

    def vjp_b(g):
        return g.sum(axis=(0, 2, 3))

    return Var(out, ((x, vjp_x), (w, vjp_w), (b, vjp_b)))


def conv_transpose2d(x, w, b):
    """Transposed convolution with kernel size equal to stride (non-overlapping patches).

    x: (B, Ci, h, w); weights (Ci, Co, sh, sw); output (B, Co, h*sh, w*sw).
    """
    xv, wv = x.value, w.value
    bsz, ci, h, wd = xv.shape
    ci2, co, sh, sw = wv.shape
    if ci != ci2:
        raise ValueError(f"conv_transpose2d: input has {ci} channels, weights expect {ci2}")
    x2 = xv.reshape(bsz, ci, h * wd)
    w2 = wv.reshape(ci, co * sh * sw)
    y = (w2.T @ x2).reshape(bsz, co, sh, sw, h, wd)
    out = y.transpose(0, 1, 4, 2, 5, 3).reshape(bsz, co, h * sh, wd * sw) + b.value[None, :, None, None]

    def unfold(g):
        return g.reshape(bsz, co, h, sh, wd, sw).transpose(0, 1, 3, 5, 2, 4).reshape(bsz, co * sh * sw, h * wd)

    def vjp_x(g):
        return (w2 @ unfold(g)).reshape(xv.shape)

    def vjp_w(g):
        return np.einsum("bcp,bkp->ck", x2, unfold(g)).reshape(wv.shape)

    def vjp_b(g):
        return g.sum(axis=(0, 2, 3))

    return Var(out, ((x, vjp_x), (w, vjp_w), (b, vjp_b)))


# ---------------------------------------------------------------- losses

def crps_loss(members, target, estimator="fair", signature=None):
    """Mean ensemble CRPS; ``members`` is (N, ...) and target a constant array.

    When ``signature`` is a list, the sign pattern of every pairwise and
    member-target difference is appended to it so callers can detect kinks.
    """
    x = members.value
    y = np.asarray(target, dtype=np.float64)
    n, m = x.shape[0], y.size
    values, grad = kernels.crps_values_grad(x.reshape(n, m), y.ravel(), estimator == "fair")
    grad = grad.reshape(x.shape) / m
    if signature is not None:
        xf = x.reshape(n, m)
        signature.append(np.sign(xf - y.ravel()[None]).astype(np.int8))
        signature.append(np.sign(xf[:, None] - xf[None]).astype(np.int8))
    return Var(values.mean(), ((members, lambda g: g * grad),))


def l1_loss(forecast, target, signature=None):
    d = forecast.value - np.asarray(target, dtype=np.float64)
    s = np.sign(d)
    if signature is not None:
        signature.append(s.astype(np.int8))
    n = d.size
    return Var(np.abs(d).mean(), ((forecast, lambda g: g * s / n),))


def gaussian_kl(mu_q, lv_q, mu_p, lv_p, direction="q||p"):
    """Mean elementwise KL divergence between diagonal Gaussians (log-variance inputs)."""
    from .losses import _kl_elementwise

    if direction == "q||p":
        a = (mu_q, lv_q, mu_p, lv_p)
    elif direction == "p||q":
        a = (mu_p, lv_p, mu_q, lv_q)
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    kl, g0, g1, g2, g3 = _kl_elementwise(*(v.value for v in a))
    n = kl.size
    grads = (g0, g1, g2, g3)
    return Var(kl.mean(), tuple((v, (lambda gg: lambda g: g * gg / n)(gg)) for v, gg in zip(a, grads)))


def clamp_log_var(lv):
    return clip(lv, LOG_VAR_MIN, LOG_VAR_MAX)


def reparameterize(mu, log_var, eps):
    """z = mu + exp(log_var / 2) * eps with eps a constant draw."""
    return add(mu, mul(exp(scale(log_var, 0.5)), const(eps)))
