"""Synthetic truth: Lorenz-96 trajectories and analytic translating vortices."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .grid import EARTH_RADIUS_KM, Field, GridSpec, destination, great_circle_km, initial_bearing

# ---------------------------------------------------------------- Lorenz-96


class IntegrationFault(FloatingPointError):
    pass


@dataclass
class L96Config:
    K: int = 40
    F: float = 8.0
    dt: float = 0.05
    spinup: int = 1000

    def __post_init__(self):
        if self.K < 4:
            raise ValueError("Lorenz-96 needs K >= 4")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


def l96_tendency(x, forcing):
    """dX_i/dt = (X_{i+1} - X_{i-2}) X_{i-1} - X_i + F on a periodic ring."""
    x = np.asarray(x, dtype=np.float64)
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + forcing


def l96_integrate(state, cfg: L96Config, steps: int) -> np.ndarray:
    """RK4 trajectory including the initial state: shape (steps + 1, K) or (steps + 1, B, K)."""
    x = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise IntegrationFault("initial state is not finite")
    single = x.ndim == 1
    traj = kernels.l96_rk4(x[None] if single else x, float(cfg.F), float(cfg.dt), int(steps))
    if not np.all(np.isfinite(traj)) or np.abs(traj).max() > 1e6:
        raise IntegrationFault("Lorenz-96 integration blew up (|X| > 1e6)")
    return traj[:, 0] if single else traj


def l96_frames(cfg: L96Config, n_frames: int, seed=0) -> tuple[GridSpec, np.ndarray]:
    """Spun-up trajectory laid on a 1 x K ring grid: (grid, frames (n, 1, 1, K))."""
    rng = np.random.default_rng(seed)
    x0 = cfg.F + 0.01 * rng.standard_normal(cfg.K)
    spun = l96_integrate(x0, cfg, cfg.spinup)[-1]
    traj = l96_integrate(spun, cfg, n_frames - 1)
    grid = GridSpec(1, cfg.K, 0.0, 1.0, 0.0, 360.0 / cfg.K)
    return grid, traj[:, None, None, :]


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    """Sliding windows over a frame stack (T, C, H, W).

    Sample t uses frames t, t+1 as inputs and t+2.. as targets; ``horizon``
    is the largest number of targets every sample may use.
    """

    frames: np.ndarray
    samples: np.ndarray
    horizon: int
    window: int = 2

    def __len__(self):
        return len(self.samples)

    def usable(self, steps):
        if steps > self.horizon:
            return np.array([], dtype=int)
        return np.arange(len(self.samples))


def build_dataset(frames, window=2, K=1, start=0, stop=None) -> Dataset:
    """All windows whose inputs and K targets lie in frames[start:stop]."""
    frames = np.asarray(frames, dtype=np.float64)
    stop = len(frames) if stop is None else stop
    if window != 2:
        raise ValueError("the state cube is built from exactly two time steps")
    n = stop - start - window - K + 1
    if n < 1:
        raise ValueError(f"need at least {window + K} frames, got {stop - start}")
    return Dataset(frames, np.arange(start, start + n), K, window)


def chronological_split(n_frames, years=17, proportions=(15, 1, 1)) -> dict[str, tuple[int, int]]:
    """Frame ranges [start, stop) for train/validation/test over equal-length synthetic years."""
    if sum(proportions) != years:
        raise ValueError("proportions must add up to the number of years")
    per_year = n_frames // years
    if per_year < 1:
        raise ValueError(f"{n_frames} frames cannot cover {years} years")
    bounds = np.cumsum([0] + [p * per_year for p in proportions])
    return {name: (int(bounds[i]), int(bounds[i + 1]))
            for i, name in enumerate(("train", "validation", "test"))}


def split_datasets(frames, years=17, proportions=(15, 1, 1), K=1) -> dict[str, Dataset]:
    ranges = chronological_split(len(frames), years, proportions)
    return {name: build_dataset(frames, 2, K, lo, hi) for name, (lo, hi) in ranges.items()}


def frame_stratum(index, frames_per_year, steps_per_day=4) -> tuple[int, int]:
    """(month 1-12, hour of day) of a synthetic frame index at 6-hourly spacing."""
    month = 1 + int(12 * (index % frames_per_year) / frames_per_year)
    hour = (index % steps_per_day) * (24 // steps_per_day)
    return month, hour


# ---------------------------------------------------------------- vortices

LEVELS = (850, 700, 500)
LEVEL_DECAY = {850: 0.8, 700: 0.6, 500: 0.4}
Z850_M_PER_HPA = 8.0


@dataclass
class Ridge:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    height: float = 1500.0


@dataclass
class VortexScenario:
    """A vortex moving along a great circle at constant speed.

    Pressure deficit is Gaussian in distance with e-folding ``radius_km``; the
    tangential wind is Rankine (peak ``vmax`` at ``radius_km``) and is damped
    beyond five radii. ``lifetime_hours`` switches the vortex off.
    """

    lat0: float
    lon0: float
    heading_deg: float = 0.0
    speed_kmh: float = 15.0
    depth_hpa: float = 40.0
    radius_km: float = 250.0
    vmax: float = 35.0
    background_hpa: float = 1010.0
    z850_background_m: float = 1500.0
    lifetime_hours: float | None = None
    horizon_hours: float = 120.0
    ridges: list = field(default_factory=list)

    def __post_init__(self):
        if self.radius_km <= 0 or self.depth_hpa <= 0:
            raise ValueError("vortex radius and depth must be positive")
        self.ridges = [r if isinstance(r, Ridge) else Ridge(**r) for r in self.ridges]

    def center(self, t_hours) -> tuple[float, float]:
        return destination((self.lat0, self.lon0), self.heading_deg, self.speed_kmh * t_hours)

    def active(self, t_hours) -> bool:
        return self.lifetime_hours is None or t_hours < self.lifetime_hours

    def steering(self, t_hours) -> tuple[float, float]:
        """(u, v) in m/s matching the motion at time t."""
        a = self.center(t_hours)
        b = self.center(t_hours + 1.0)
        brg = math.radians(initial_bearing(a, b)) if a != b else math.radians(self.heading_deg)
        spd = self.speed_kmh / 3.6
        return spd * math.sin(brg), spd * math.cos(brg)

    def to_dict(self):
        d = asdict(self)
        d["ridges"] = [asdict(r) for r in self.ridges]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def save_scenarios(path, scenarios, extra=None):
    doc = {"scenarios": [s.to_dict() for s in scenarios]}
    doc.update(extra or {})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_scenarios(path) -> list[VortexScenario]:
    with open(path) as fh:
        doc = json.load(fh)
    return [VortexScenario.from_dict(d) for d in doc["scenarios"]]


def tangential_profile(d_km, radius_km, vmax):
    d = np.asarray(d_km, dtype=np.float64)
    inner = vmax * d / radius_km
    outer = vmax * radius_km / np.maximum(d, 1e-9)
    v = np.where(d < radius_km, inner, outer)
    return np.where(d > 5 * radius_km, v * np.exp(-(d - 5 * radius_km) / radius_km), v)


def _bearing_field(center, lat2, lon2):
    la1, lo1 = math.radians(center[0]), math.radians(center[1])
    la2, lo2 = np.deg2rad(lat2), np.deg2rad(lon2)
    y = np.sin(lo2 - lo1) * np.cos(la2)
    x = math.cos(la1) * np.sin(la2) - math.sin(la1) * np.cos(la2) * np.cos(lo2 - lo1)
    return np.arctan2(y, x)


def vortex_fields(scenarios, t_hours, grid: GridSpec) -> dict:
    """Gridded MSL, winds (10 m and steering levels), Z850 and elevation at time t.

    ``scenarios`` may be one scenario or a list; contributions superpose and the
    steering flow is taken from the first. Returns Fields keyed by name plus
    ``centers``: analytic centres of the active vortices.
    """
    if isinstance(scenarios, VortexScenario):
        scenarios = [scenarios]
    lat2, lon2 = grid.mesh()
    msl = np.full(grid.shape, scenarios[0].background_hpa)
    z850 = np.full(grid.shape, scenarios[0].z850_background_m)
    ut, vt = np.zeros(grid.shape), np.zeros(grid.shape)
    us, vs = scenarios[0].steering(t_hours)
    elev = np.zeros(grid.shape)
    centers = []
    for sc in scenarios:
        for r in sc.ridges:
            inside = ((lat2 >= r.lat_min) & (lat2 <= r.lat_max)
                      & ((lon2 - r.lon_min) % 360.0 <= (r.lon_max - r.lon_min) % 360.0))
            elev = np.maximum(elev, np.where(inside, r.height, 0.0))
        if not sc.active(t_hours):
            continue
        c = sc.center(t_hours)
        centers.append(c)
        d = great_circle_km(c, (lat2, lon2))
        shape = np.exp(-(d / sc.radius_km) ** 2)
        msl -= sc.depth_hpa * shape
        z850 -= Z850_M_PER_HPA * sc.depth_hpa * shape
        speed = tangential_profile(d, sc.radius_km, sc.vmax)
        b = _bearing_field(c, lat2, lon2)
        hemi = 1.0 if c[0] >= 0 else -1.0
        # counter-clockwise in the northern hemisphere
        ut += -hemi * speed * np.cos(b)
        vt += hemi * speed * np.sin(b)
    out = {"msl": Field(grid, msl), "z850": Field(grid, z850), "elevation": Field(grid, elev),
           "u10": Field(grid, us + ut), "v10": Field(grid, vs + vt), "centers": centers}
    for lev in LEVELS:
        out[f"u{lev}"] = Field(grid, us + LEVEL_DECAY[lev] * ut)
        out[f"v{lev}"] = Field(grid, vs + LEVEL_DECAY[lev] * vt)
    return out


def relative_vorticity(u: Field, v: Field) -> np.ndarray:
    """Centred-difference relative vorticity dv/dx - du/dy on the sphere (s^-1)."""
    g = u.grid
    r = EARTH_RADIUS_KM * 1000.0
    lat = np.deg2rad(g.lats)[:, None]
    dlon = math.radians(g.lon_step)
    dlat = math.radians(g.lat_step)
    if g.periodic:
        dvdl = (np.roll(v.values, -1, axis=1) - np.roll(v.values, 1, axis=1)) / (2 * dlon)
    else:
        dvdl = np.gradient(v.values, dlon, axis=1)
    ucos = u.values * np.cos(lat)
    ducos = np.gradient(ucos, dlat, axis=0) if g.nlat > 1 else np.zeros_like(ucos)
    coslat = np.maximum(np.cos(lat), 1e-6)
    return (dvdl - ducos) / (r * coslat)


def random_scenario(rng: np.random.Generator, box, min_speed_kmh=10.0, max_speed_kmh=40.0,
                    horizon_hours=120.0, **kwargs) -> VortexScenario:
    """Straight-heading vortex whose track stays inside box = (lat_lo, lat_hi, lon_lo, lon_hi)."""
    lat_lo, lat_hi, lon_lo, lon_hi = box
    for _ in range(10000):
        heading = float(rng.uniform(0.0, 360.0))
        speed = float(rng.uniform(min_speed_kmh, max_speed_kmh))
        lat0 = float(rng.uniform(lat_lo, lat_hi))
        lon0 = float(rng.uniform(lon_lo, lon_hi))
        sc = VortexScenario(lat0, lon0, heading, speed, horizon_hours=horizon_hours, **kwargs)
        pts = [sc.center(t) for t in np.linspace(0.0, horizon_hours, 11)]
        if all(lat_lo <= la <= lat_hi and lon_lo <= lo <= lon_hi for la, lo in pts):
            return sc
    raise ValueError(f"could not place a {horizon_hours} h track inside {box}")
