"""Toy-scale VAE-perturbed ensemble forecaster.

Three networks share one encode/process/decode shape:

* ``P`` maps the current two-slice state cube to a Gaussian over perturbations,
* ``Q`` additionally sees the next-step truth and is sampled during training,
* ``F`` forecasts the next slice from the perturbed cube.

The encoder is a patch convolution (kernel = stride), the processor a stack
of residual ``tanh`` convolutions that wrap in longitude, and the decoder a
transposed patch convolution. P and Q end in zero-initialised layers, so an
untrained model perturbs with N(0, I); F's decoder is zero-initialised and
added to the latest input slice, so an untrained F is the identity.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .fileio import read_container, write_container
from .grid import GridSpec
from .losses import GaussianLatent, LOG_VAR_MIN

CHECKPOINT_MAGIC = b"ENSC"
ENSEMBLE_MAGIC = b"ENSE"
N_AUX = 3  # sin/cos of hour-of-day, static mask
STEPS_PER_DAY = 4


class NumericFault(FloatingPointError):
    """Non-finite activation; ``where`` names the network/layer (and member/step)."""

    def __init__(self, where):
        super().__init__(f"non-finite values in {where}")
        self.where = where


@dataclass
class Architecture:
    channels: int
    nlat: int
    nlon: int
    hidden: int = 16
    blocks: int = 2
    patch: tuple = (2, 2)
    kernel: tuple = (3, 3)

    def __post_init__(self):
        self.patch = tuple(int(v) for v in self.patch)
        self.kernel = tuple(int(v) for v in self.kernel)
        if self.nlat % self.patch[0] or self.nlon % self.patch[1]:
            raise ValueError(f"grid {self.nlat}x{self.nlon} not divisible by patch {self.patch}")
        if not 1 <= self.blocks <= 8:
            raise ValueError("blocks must be between 1 and 8")

    @classmethod
    def for_grid(cls, channels, nlat, nlon, hidden=16, blocks=2):
        """Default shape: 2x2 patches and 3x3 kernels, or 1x2 / 1x3 for single-row rings."""
        if nlat == 1:
            return cls(channels, nlat, nlon, hidden, blocks, (1, 2), (1, 3))
        return cls(channels, nlat, nlon, hidden, blocks, (2, 2), (3, 3))

    def net_io(self) -> dict[str, tuple[int, int]]:
        c = self.channels
        return {"P": (2 * c + N_AUX, 4 * c), "Q": (4 * c + N_AUX, 4 * c), "F": (2 * c + N_AUX, c)}

    def to_dict(self):
        d = asdict(self)
        d["patch"], d["kernel"] = list(self.patch), list(self.kernel)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelParams:
    arch: Architecture
    arrays: dict = field(default_factory=dict)
    mean: np.ndarray | None = None  # per-channel standardisation
    std: np.ndarray | None = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.arrays.items()},
                           None if self.mean is None else self.mean.copy(),
                           None if self.std is None else self.std.copy())

    @property
    def count(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def expected_shapes(self) -> dict[str, tuple]:
        a = self.arch
        shapes = {}
        for net, (cin, cout) in a.net_io().items():
            shapes[f"{net}.enc_w"] = (a.hidden, cin) + a.patch
            shapes[f"{net}.enc_b"] = (a.hidden,)
            for i in range(a.blocks):
                shapes[f"{net}.blk{i}_w"] = (a.hidden, a.hidden) + a.kernel
                shapes[f"{net}.blk{i}_b"] = (a.hidden,)
            shapes[f"{net}.dec_w"] = (a.hidden, cout) + a.patch
            shapes[f"{net}.dec_b"] = (cout,)
        return shapes

    def validate(self):
        want = self.expected_shapes()
        if set(want) != set(self.arrays):
            raise ValueError("parameter names do not match the architecture descriptor")
        for k, shape in want.items():
            if self.arrays[k].shape != shape:
                raise ValueError(f"{k}: shape {self.arrays[k].shape}, expected {shape}")
            if not np.all(np.isfinite(self.arrays[k])):
                raise NumericFault(f"parameter {k}")

    def standardize(self, x):
        return (x - self.mean[:, None, None]) / self.std[:, None, None]

    def destandardize(self, x):
        return x * self.std[:, None, None] + self.mean[:, None, None]


def init_params(arch: Architecture, seed=0, mean=None, std=None) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = ModelParams(arch)
    for name, shape in params.expected_shapes().items():
        if name.endswith("_b") or ".dec_" in name:
            params.arrays[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = 0.5 if ".blk" in name else 1.0
        params.arrays[name] = rng.normal(0.0, gain / math.sqrt(fan_in), size=shape)
    c = arch.channels
    params.mean = np.zeros(c) if mean is None else np.asarray(mean, dtype=np.float64)
    params.std = np.ones(c) if std is None else np.asarray(std, dtype=np.float64)
    return params


def aux_channels(step_index, batch, arch: Architecture, mask=None):
    """Hour-of-day phase as sin/cos planes plus a static mask plane."""
    phase = 2.0 * math.pi * (step_index % STEPS_PER_DAY) / STEPS_PER_DAY
    out = np.empty((batch, N_AUX, arch.nlat, arch.nlon))
    out[:, 0] = math.sin(phase)
    out[:, 1] = math.cos(phase)
    out[:, 2] = 1.0 if mask is None else mask
    return out


def _check(var, where):
    if not np.all(np.isfinite(var.value)):
        raise NumericFault(where)
    return var


def net_forward(tensors, net, x, arch: Architecture):
    """Run network ``net`` ("P", "Q" or "F") on a Var of shape (B, Cin, H, W)."""
    kh, kw = arch.kernel
    h = _check(ad.conv2d(x, tensors[f"{net}.enc_w"], tensors[f"{net}.enc_b"], stride=arch.patch),
               f"{net} layer 0 (encoder)")
    for i in range(arch.blocks):
        u = ad.conv2d(h, tensors[f"{net}.blk{i}_w"], tensors[f"{net}.blk{i}_b"],
                      padding=(kh // 2, kw // 2), periodic=True)
        h = _check(ad.add(h, ad.tanh(u)), f"{net} layer {i + 1}")
    return _check(ad.conv_transpose2d(h, tensors[f"{net}.dec_w"], tensors[f"{net}.dec_b"]),
                  f"{net} layer {arch.blocks + 1} (decoder)")


def latent_vars(tensors, net, x, arch):
    out = net_forward(tensors, net, x, arch)
    k = out.shape[1] // 2
    return ad.take_channels(out, 0, k), ad.clamp_log_var(ad.take_channels(out, k, 2 * k))


def as_tensors(params: ModelParams):
    return {k: ad.Var(v, name=k) for k, v in params.arrays.items()}


def _batch(cube):
    cube = np.asarray(cube, dtype=np.float64)
    return cube[None] if cube.ndim == 3 else cube


def perturb_p(params: ModelParams, cube, step_index=0) -> GaussianLatent:
    """Gaussian over perturbations from the (standardised) state cube alone."""
    x = _batch(cube)
    aux = aux_channels(step_index, x.shape[0], params.arch)
    mu, lv = latent_vars(as_tensors(params), "P", ad.Var(np.concatenate([x, aux], axis=1)), params.arch)
    return GaussianLatent(mu.value.reshape(np.shape(cube)), lv.value.reshape(np.shape(cube)))


def perturb_q(params: ModelParams, cube, cube_next, step_index=0) -> GaussianLatent:
    """Teacher Gaussian: sees the current cube and the window shifted onto next-step truth."""
    x, xn = _batch(cube), _batch(cube_next)
    aux = aux_channels(step_index, x.shape[0], params.arch)
    inp = ad.Var(np.concatenate([x, xn, aux], axis=1))
    mu, lv = latent_vars(as_tensors(params), "Q", inp, params.arch)
    return GaussianLatent(mu.value.reshape(np.shape(cube)), lv.value.reshape(np.shape(cube)))


def sample(latent: GaussianLatent, rng: np.random.Generator) -> np.ndarray:
    """Reparameterised draw z = mu + exp(log_var / 2) * eps."""
    eps = rng.standard_normal(latent.shape)
    return latent.mu + latent.std * eps


def forecast_forward(tensors, cube_var, arch, step_index):
    """Next standardised slice for a batch of (perturbed) cubes; residual on the latest slice."""
    c = arch.channels
    aux = ad.Var(aux_channels(step_index, cube_var.shape[0], arch))
    delta = net_forward(tensors, "F", ad.concat([cube_var, aux], axis=1), arch)
    return ad.add(ad.take_channels(cube_var, c, 2 * c), delta)


def forecast_step(params: ModelParams, perturbed_cube, step_index=0) -> np.ndarray:
    x = _batch(perturbed_cube)
    out = forecast_forward(as_tensors(params), ad.Var(x), params.arch, step_index).value
    return out[0] if np.ndim(perturbed_cube) == 3 else out


def member_rng(seed, member) -> np.random.Generator:
    """Independent stream per (seed, member index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(member),))))


@dataclass
class EnsembleForecast:
    """members x leads x C x H x W in physical units, plus provenance."""

    fields: np.ndarray
    grid: GridSpec
    init_time: int = 0
    step_hours: float = 6.0
    channel_names: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def members(self):
        return self.fields.shape[0]

    @property
    def leads(self):
        return self.fields.shape[1]

    def mean(self):
        return self.fields.mean(axis=0)


def rollout(params: ModelParams, init_cube, members, steps, seed, perturbation="model",
            member_ids=None, step_offset=0, latent_override=None, grid=None) -> EnsembleForecast:
    """Autoregressive ensemble: perturb with a draw from P, forecast, shift the window.

    ``init_cube`` is (2C, H, W) in physical units. ``perturbation`` is "model"
    (sample P), "mean" (z = mu, the zero-variance limit) or "none" (z = 0).
    ``latent_override(mu, log_var, step) -> (mu, log_var)`` replaces P's output.
    """
    if members < 1 or steps < 1:
        raise ValueError("rollout needs members >= 1 and steps >= 1")
    arch = params.arch
    c = arch.channels
    ids = list(range(members)) if member_ids is None else [int(m) for m in member_ids]
    if len(ids) != members:
        raise ValueError("member_ids length must equal members")
    rngs = [member_rng(seed, m) for m in ids]
    mean_std = np.concatenate([params.mean, params.mean]), np.concatenate([params.std, params.std])
    cube0 = (np.asarray(init_cube, dtype=np.float64) - mean_std[0][:, None, None]) / mean_std[1][:, None, None]
    cube = np.repeat(cube0[None], members, axis=0)
    tensors = as_tensors(params)
    out = np.empty((members, steps, c, arch.nlat, arch.nlon))
    for s in range(steps):
        k = step_offset + s
        try:
            if perturbation == "none":
                z = np.zeros_like(cube)
            else:
                aux = aux_channels(k, members, arch)
                mu_v, lv_v = latent_vars(tensors, "P", ad.Var(np.concatenate([cube, aux], axis=1)), arch)
                mu, lv = mu_v.value, lv_v.value
                if latent_override is not None:
                    mu, lv = latent_override(mu, lv, s)
                if perturbation == "mean":
                    z = mu
                elif perturbation == "model":
                    lv = np.clip(lv, LOG_VAR_MIN, None)
                    eps = np.stack([r.standard_normal(cube.shape[1:]) for r in rngs])
                    z = mu + np.exp(0.5 * lv) * eps
                else:
                    raise ValueError(f"unknown perturbation mode {perturbation!r}")
            nxt = forecast_forward(tensors, ad.Var(cube + z), arch, k).value
        except NumericFault as exc:
            raise NumericFault(f"{exc.where} at step {s + 1}") from None
        bad = ~np.isfinite(nxt).reshape(members, -1).all(axis=1)
        if bad.any():
            raise NumericFault(f"forecast of member {ids[int(np.argmax(bad))]} at step {s + 1}")
        out[:, s] = nxt * params.std[:, None, None] + params.mean[:, None, None]
        cube = np.concatenate([cube[:, c:], nxt], axis=1)
    if grid is None:
        grid = GridSpec(arch.nlat, arch.nlon, 0.0, 1.0, 0.0, 360.0 / arch.nlon) if arch.nlat == 1 else None
    return EnsembleForecast(out, grid, init_time=step_offset)


# ---------------------------------------------------------------- persistence

def save_checkpoint(path, params: ModelParams, header=None):
    head = {"format": "ensbench-checkpoint", "version": 1, "architecture": params.arch.to_dict(),
            "standardization": {"mean": params.mean.tolist(), "std": params.std.tolist()}}
    head.update(header or {})
    write_container(path, CHECKPOINT_MAGIC, head, dict(sorted(params.arrays.items())))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    arch = Architecture.from_dict(header["architecture"])
    st = header["standardization"]
    params = ModelParams(arch, arrays, np.array(st["mean"]), np.array(st["std"]))
    params.validate()
    return params, header


def save_ensembles(path, forecasts: list[EnsembleForecast], header=None):
    """Stack same-shaped ensemble forecasts (one per initial time) into one container."""
    if not forecasts:
        raise ValueError("no forecasts to save")
    f0 = forecasts[0]
    head = {"format": "ensbench-ensemble", "version": 1, "grid": f0.grid.to_dict(),
            "init_times": [int(f.init_time) for f in forecasts], "step_hours": f0.step_hours,
            "channel_names": list(f0.channel_names)}
    head.update(header or {})
    write_container(path, ENSEMBLE_MAGIC, head, {"fields": np.stack([f.fields for f in forecasts])})


def load_ensembles(path) -> tuple[list[EnsembleForecast], dict]:
    header, arrays = read_container(path, ENSEMBLE_MAGIC)
    grid = GridSpec.from_dict(header["grid"])
    out = [EnsembleForecast(arr, grid, t, header["step_hours"], tuple(header["channel_names"]))
           for arr, t in zip(arrays["fields"], header["init_times"])]
    return out, header
