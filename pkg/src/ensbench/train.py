"""Curriculum training of the perturbation and forecast networks, plus gradient checking."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dynamics import Dataset
from .losses import LOG_VAR_MAX
from .model import ModelParams, aux_channels, forecast_forward, latent_vars, NumericFault

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 1e-4
    curriculum_steps: int = 3
    iters_per_stage: int = 300
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    members: int = 8
    batch_size: int = 1
    seed: int = 0
    loss: str = "crps"  # or "l1"
    estimator: str = "fair"
    kl_direction: str = "q||p"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.curriculum_steps < 1:
            raise ValueError("curriculum_steps must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.loss not in ("crps", "l1"):
            raise ValueError(f"loss must be 'crps' or 'l1', got {self.loss!r}")
        if self.loss == "crps" and self.estimator == "fair" and self.members < 2:
            raise ValueError("fair CRPS training needs at least 2 members")


@dataclass
class Batch:
    """One training window in standardised units.

    cube: (2C, H, W) at (t-1, t); targets: (k, C, H, W) for t+1..t+k;
    eps: (k, N, 2C, H, W) standard-normal draws for the reparameterisation.
    """

    cube: np.ndarray
    targets: np.ndarray
    eps: np.ndarray
    step_index: int = 0

    @property
    def steps(self):
        return self.targets.shape[0]


@dataclass
class TrainResult:
    params: ModelParams
    records: list = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, result: TrainResult):
        super().__init__(message)
        self.result = result


def make_batch(params: ModelParams, dataset: Dataset, index, steps, members, rng) -> Batch:
    frames = dataset.frames
    t0 = dataset.samples[index]
    cube = np.concatenate([params.standardize(frames[t0]), params.standardize(frames[t0 + 1])])
    targets = np.stack([params.standardize(frames[t0 + 2 + s]) for s in range(steps)])
    eps = rng.standard_normal((steps, members) + cube.shape)
    return Batch(cube, targets, eps, int(t0 + 1))


def objective(params: ModelParams, batch: Batch, cfg: TrainConfig, signature=None):
    """Mean over rollout steps of [CRPS (or L1) + lam * KL(q || p)].

    Returns (total, crps_term, kl_term, grads) where grads maps parameter names
    to arrays. Perturbations come from Q at every step.
    """
    tensors = {k: ad.Var(v, name=k) for k, v in params.arrays.items()}
    arch = params.arch
    c = arch.channels
    n = batch.eps.shape[1]
    cube = ad.Var(np.repeat(batch.cube[None], n, axis=0))
    fit_terms, kl_terms = [], []
    for s in range(batch.steps):
        k = batch.step_index + s
        aux = aux_channels(k, n, arch)
        truth = batch.targets[s]
        latest = ad.take_channels(cube, c, 2 * c)
        mu_p, lv_p = latent_vars(tensors, "P", ad.concat([cube, ad.Var(aux)], axis=1), arch)
        q_in = ad.concat([cube, latest, ad.Var(np.repeat(truth[None], n, axis=0)), ad.Var(aux)], axis=1)
        mu_q, lv_q = latent_vars(tensors, "Q", q_in, arch)
        if signature is not None:
            # clamped entries sit exactly on the bounds
            signature.append(np.concatenate([np.abs(lv_p.value) == LOG_VAR_MAX,
                                             np.abs(lv_q.value) == LOG_VAR_MAX]).ravel())
        z = ad.reparameterize(mu_q, lv_q, batch.eps[s])
        pred = forecast_forward(tensors, ad.add(cube, z), arch, k)
        if cfg.loss == "crps":
            fit_terms.append(ad.crps_loss(pred, truth, cfg.estimator, signature))
        else:
            fit_terms.append(ad.l1_loss(pred, np.repeat(truth[None], n, axis=0), signature))
        kl_terms.append(ad.gaussian_kl(mu_q, lv_q, mu_p, lv_p, cfg.kl_direction))
        cube = ad.concat([latest, pred], axis=1)
    w = 1.0 / batch.steps
    total = ad.add_scalars(fit_terms + kl_terms, [w] * len(fit_terms) + [w * cfg.lam] * len(kl_terms))
    total.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in tensors.items()}
    fit = float(sum(t.value for t in fit_terms) * w)
    kl = float(sum(t.value for t in kl_terms) * w)
    return float(total.value), fit, kl, grads


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict, lr, beta1, beta2, weight_decay, eps=1e-8):
        self.lr, self.b1, self.b2, self.wd, self.eps = lr, beta1, beta2, weight_decay, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] *= 1.0 - self.lr * self.wd
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(cfg: TrainConfig, dataset: Dataset, params: ModelParams, callback=None) -> TrainResult:
    """Curriculum training: stage k runs ``iters_per_stage`` iterations of k-step rollouts.

    ``params`` supplies the initial weights and standardisation (see
    :func:`ensbench.model.init_params`). Each record holds iteration, stage,
    rollout_steps, crps_term, kl_term and total.
    """
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(params.arrays, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay)
    result = TrainResult(params.copy())
    it = 0
    for stage in range(1, cfg.curriculum_steps + 1):
        usable = dataset.usable(stage)
        if len(usable) == 0:
            raise ValueError(f"no training windows long enough for {stage} rollout steps")
        for _ in range(cfg.iters_per_stage):
            # gradients of the batch mean, windows drawn independently
            total = fit = kl = 0.0
            grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
            for _ in range(cfg.batch_size):
                idx = int(usable[rng.integers(len(usable))])
                batch = make_batch(params, dataset, idx, stage, cfg.members, rng)
                try:
                    t_, f_, k_, g_ = objective(params, batch, cfg)
                except NumericFault as exc:
                    raise TrainingDiverged(f"iteration {it}: {exc}", result) from None
                total += t_ / cfg.batch_size
                fit += f_ / cfg.batch_size
                kl += k_ / cfg.batch_size
                for k in grads:
                    grads[k] += g_[k] / cfg.batch_size
            if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"loss became non-finite at iteration {it}", result)
            rec = {"iteration": it, "stage": stage, "rollout_steps": stage,
                   "crps_term": fit, "kl_term": kl, "total": total}
            result.records.append(rec)
            if callback is not None:
                callback(rec)
            opt.step(params.arrays, grads)
            result.params = params.copy()
            it += 1
        log.info("stage %d done: last total %.5f", stage, result.records[-1]["total"])
    return result


def _signature(params, batch, cfg):
    sig = []
    objective(params, batch, cfg, signature=sig)
    return sig


def _same(sa, sb):
    return len(sa) == len(sb) and all(np.array_equal(a, b) for a, b in zip(sa, sb))


def grad_check(params: ModelParams, batch: Batch, cfg: TrainConfig, eps=1e-5, n_coords=200,
               seed=0, floor=1e-6, loss_fn=None, detail=False):
    """Compare tape gradients with central differences on random parameter coordinates.

    Coordinates whose +-eps perturbation changes the sign pattern of any CRPS,
    L1 or clamp argument sit next to a kink and are skipped. The relative error
    is |g - fd| / max(|g|, |fd|, floor). ``loss_fn(arrays) -> (value, grads)``
    replaces the training objective (used for surrogate checks).

    Returns (max relative error, number of coordinates checked), plus the
    array of absolute errors when ``detail`` is set.
    """
    p = params.copy()
    if loss_fn is None:
        def loss_fn(arrays):
            p.arrays = arrays
            total, _, _, grads = objective(p, batch, cfg)
            return total, grads

        def sig_fn(arrays):
            p.arrays = arrays
            return _signature(p, batch, cfg)
    else:
        def sig_fn(arrays):
            return []

    base = {k: v.copy() for k, v in params.arrays.items()}
    _, grads = loss_fn({k: v.copy() for k, v in base.items()})
    sig0 = sig_fn({k: v.copy() for k, v in base.items()})
    rng = np.random.default_rng(seed)
    names = sorted(base)
    sizes = np.array([base[k].size for k in names])
    flat_idx = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, checked, abs_err = 0.0, 0, []
    for fi in np.sort(flat_idx):
        ni = int(np.searchsorted(offsets, fi, side="right") - 1)
        name, local = names[ni], int(fi - offsets[ni])
        vals = []
        skip = False
        for sgn in (1.0, -1.0):
            arrays = {k: v.copy() for k, v in base.items()}
            arrays[name].flat[local] += sgn * eps
            if not _same(sig_fn({k: v.copy() for k, v in arrays.items()}), sig0):
                skip = True
                break
            vals.append(loss_fn(arrays)[0])
        if skip:
            continue
        fd = (vals[0] - vals[1]) / (2.0 * eps)
        g = float(grads[name].flat[local])
        rel = abs(g - fd) / max(abs(g), abs(fd), floor)
        worst = max(worst, rel)
        abs_err.append(abs(g - fd))
        checked += 1
    if detail:
        return worst, checked, np.array(abs_err)
    return worst, checked
