"""Tropical-cyclone tracking on gridded forecasts and ensemble track statistics.

Detection pools MSL onto a coarser grid, gathers pooled-MSL minima and
10 m vorticity maxima near a prior position, refines each one to the native
MSL minimum and keeps it when the configured criteria hold and the terrain
is below the elevation limit. Tracking advances a first guess from linear
extrapolation and the steering wind, then takes the nearest valid candidate.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime

import numpy as np

from . import kernels
from .dynamics import LEVELS, relative_vorticity
from .grid import (Field, average_pool, great_circle_km, local_offset_km,
                   offset_point)

DEFAULT_CRITERIA = ("msl_minimum", "vorticity", "z850_minimum")


class TrackingError(ValueError):
    pass


class UndefinedDecompositionError(TrackingError):
    pass


@dataclass
class TrackerConfig:
    radius_km: float = 445.0
    pool_factor: int = 5
    criteria: tuple = DEFAULT_CRITERIA
    vorticity_threshold: float = 5e-5
    z850_radius_km: float = 278.0
    vorticity_radius_km: float = 278.0
    elevation_max_m: float = 1000.0
    step_hours: float = 6.0
    levels: tuple = LEVELS
    steering_radius_km: float = 300.0
    cap_factor: float = 3.0

    def __post_init__(self):
        self.criteria = tuple(self.criteria)
        self.levels = tuple(int(v) for v in self.levels)
        unknown = set(self.criteria) - set(DEFAULT_CRITERIA)
        if unknown:
            raise TrackingError(f"unknown detection criteria: {sorted(unknown)}")


@dataclass
class Candidate:
    lat: float
    lon: float
    msl: float
    source: str  # "msl" or "vorticity" (which coarse extremum produced it)
    index: tuple = (0, 0)


@dataclass
class Detection:
    accepted: list = field(default_factory=list)
    rejected: list = field(default_factory=list)  # (Candidate, reason)

    @property
    def blocked_by_elevation(self):
        return not self.accepted and any(r == "elevation" for _, r in self.rejected)


@dataclass
class TrackPoint:
    time: float  # lead hours
    lat: float
    lon: float
    msl_min: float = math.nan


@dataclass
class Track:
    points: list = field(default_factory=list)
    member: int | None = None
    terminated_reason: str = "horizon"  # lost | elevation | horizon

    def __len__(self):
        return len(self.points)

    def at(self, time):
        for p in self.points:
            if abs(p.time - time) < 1e-9:
                return p
        return None

    def positions(self):
        return [(p.lat, p.lon) for p in self.points]


def _grid_check(fields):
    grids = {k: f.grid for k, f in fields.items() if isinstance(f, Field)}
    if not grids:
        raise TrackingError("no fields supplied")
    first = next(iter(grids.values()))
    for k, g in grids.items():
        if g != first:
            raise TrackingError(f"field {k!r} on grid {g.describe()}, expected {first.describe()}")
        if fields[k].values.size == 0:
            raise TrackingError(f"field {k!r} is empty")
    return first


def _interior(mask, periodic):
    mask = mask.copy()
    mask[0, :] = mask[-1, :] = False
    if not periodic:
        mask[:, 0] = mask[:, -1] = False
    return mask


def _within(grid, center, radius_km):
    lat2, lon2 = grid.mesh()
    return great_circle_km(center, (lat2, lon2)) <= radius_km


def detect_candidates(fields: dict, prior, cfg: TrackerConfig | None = None, radius_km=None) -> Detection:
    """Cyclone-centre candidates within ``radius_km`` of ``prior`` (lat, lon).

    ``fields`` needs Fields "msl", "u10", "v10", "z850" and optionally "elevation".
    Accepted candidates are sorted by distance from the prior.
    """
    cfg = cfg or TrackerConfig()
    radius = cfg.radius_km if radius_km is None else radius_km
    for name in ("msl", "u10", "v10", "z850"):
        if name not in fields:
            raise TrackingError(f"missing field {name!r}")
    grid = _grid_check(fields)
    f = cfg.pool_factor
    msl = fields["msl"]
    vort = relative_vorticity(fields["u10"], fields["v10"])
    lat2, lon2 = grid.mesh()
    hemi = np.where(lat2 >= 0, 1.0, -1.0)
    cyclonic = hemi * vort

    coarse_msl = average_pool(msl, f, edge="truncate")
    coarse_vort = average_pool(Field(grid, cyclonic), f, edge="truncate").values
    cg = coarse_msl.grid
    near = _within(cg, prior, radius)
    mins = _interior(kernels.local_extrema(coarse_msl.values, False, cg.periodic), cg.periodic) & near
    maxs = _interior(kernels.local_extrema(coarse_vort, True, cg.periodic), cg.periodic) & near
    seeds = [(i, j, "msl") for i, j in zip(*np.nonzero(mins))]
    seeds += [(i, j, "vorticity") for i, j in zip(*np.nonzero(maxs)) if not mins[i, j]]

    native_min = kernels.local_extrema(msl.values, False, grid.periodic)
    z_min = kernels.local_extrema(fields["z850"].values, False, grid.periodic)
    elev = fields.get("elevation")
    det = Detection()
    seen = set()
    for ci, cj, source in seeds:
        i0, i1 = max((ci - 1) * f, 0), min((ci + 2) * f, grid.nlat)
        if grid.periodic:
            cols = np.arange((cj - 1) * f, (cj + 2) * f) % grid.nlon
        else:
            cols = np.arange(max((cj - 1) * f, 0), min((cj + 2) * f, grid.nlon))
        win = msl.values[i0:i1][:, cols]
        wi, wj = np.unravel_index(np.argmin(win), win.shape)
        ni, nj = i0 + int(wi), int(cols[wj])
        if (ni, nj) in seen:
            continue
        seen.add((ni, nj))
        cand = Candidate(float(lat2[ni, nj]), float(lon2[ni, nj]), float(msl.values[ni, nj]), source, (ni, nj))
        if great_circle_km(prior, (cand.lat, cand.lon)) > radius:
            det.rejected.append((cand, "radius"))
            continue
        reason = None
        if "msl_minimum" in cfg.criteria and not native_min[ni, nj]:
            reason = "msl_minimum"
        if reason is None and ("vorticity" in cfg.criteria or "z850_minimum" in cfg.criteria):
            dist = great_circle_km((cand.lat, cand.lon), (lat2, lon2))
            if "vorticity" in cfg.criteria:
                disc = dist <= cfg.vorticity_radius_km
                if cyclonic[disc].max() < cfg.vorticity_threshold:
                    reason = "vorticity"
            if reason is None and "z850_minimum" in cfg.criteria:
                if not np.any(z_min & (dist <= cfg.z850_radius_km)):
                    reason = "z850_minimum"
        if reason is None and elev is not None and elev.values[ni, nj] > cfg.elevation_max_m:
            reason = "elevation"
        if reason is None:
            det.accepted.append(cand)
        else:
            det.rejected.append((cand, reason))
    det.accepted.sort(key=lambda c: (great_circle_km(prior, (c.lat, c.lon)), c.index))
    return det


def steering_wind(fields: dict, position, cfg: TrackerConfig | None = None) -> tuple[float, float]:
    """Mean (u, v) over the configured levels within ``steering_radius_km`` of position."""
    cfg = cfg or TrackerConfig()
    grid = fields[f"u{cfg.levels[0]}"].grid
    disc = _within(grid, position, cfg.steering_radius_km)
    if not disc.any():
        disc = np.zeros(grid.shape, dtype=bool)
        disc[grid.index_of(*position)] = True
    us = [fields[f"u{lev}"].values[disc].mean() for lev in cfg.levels]
    vs = [fields[f"v{lev}"].values[disc].mean() for lev in cfg.levels]
    return float(np.mean(us)), float(np.mean(vs))


def predict_displacement(history, wind, dt_hours=6.0, cap_factor=3.0) -> tuple[float, float]:
    """First guess for the next centre.

    With one known position the steering wind alone advects it; with two, the
    advection displacement is averaged with linear extrapolation and capped at
    ``cap_factor`` times the previous step's distance.
    """
    if not history:
        raise TrackingError("need at least one position")
    cur = history[-1]
    secs = dt_hours * 3600.0
    adv = (wind[0] * secs / 1000.0, wind[1] * secs / 1000.0)
    if len(history) < 2:
        return offset_point(cur, *adv)
    prev = history[-2]
    ext = local_offset_km(prev, cur)
    east, north = 0.5 * (ext[0] + adv[0]), 0.5 * (ext[1] + adv[1])
    limit = cap_factor * great_circle_km(prev, cur)
    size = math.hypot(east, north)
    if size > limit:
        scale = limit / size if size > 0 else 0.0
        east, north = east * scale, north * scale
    return offset_point(cur, east, north)


def track_storm(forecast, init_obs, cfg: TrackerConfig | None = None, member=None, n_leads=None) -> Track:
    """Follow one cyclone through a sequence of per-lead field dicts.

    ``forecast`` is a sequence (or callable lead_index -> fields); leads are
    ``cfg.step_hours`` apart starting at the analysis.
    """
    cfg = cfg or TrackerConfig()
    get = forecast if callable(forecast) else (lambda k: forecast[k])
    if n_leads is None:
        if callable(forecast):
            raise TrackingError("n_leads is required with a callable forecast")
        n_leads = len(forecast)
    track = Track(member=member)
    fields = get(0)
    det = detect_candidates(fields, init_obs, cfg)
    if not det.accepted:
        track.terminated_reason = "elevation" if det.blocked_by_elevation else "lost"
        return track
    c = det.accepted[0]
    track.points.append(TrackPoint(0.0, c.lat, c.lon, c.msl))
    for k in range(1, n_leads):
        hist = track.positions()[-2:]
        guess = predict_displacement(hist, steering_wind(fields, hist[-1], cfg), cfg.step_hours, cfg.cap_factor)
        fields = get(k)
        det = detect_candidates(fields, guess, cfg)
        if len(hist) == 2:
            limit = cfg.cap_factor * great_circle_km(hist[0], hist[1]) + 1e-9
            ok = [c for c in det.accepted if great_circle_km(hist[1], (c.lat, c.lon)) <= limit]
            det.rejected += [(c, "displacement_cap") for c in det.accepted if c not in ok]
            det.accepted = ok
        if not det.accepted:
            track.terminated_reason = "elevation" if det.blocked_by_elevation else "lost"
            return track
        c = det.accepted[0]
        track.points.append(TrackPoint(k * cfg.step_hours, c.lat, c.lon, c.msl))
    track.terminated_reason = "horizon"
    return track


# ---------------------------------------------------------------- statistics

def along_cross_track(forecast, observed, motion_from, motion_to) -> tuple[float, float]:
    """(AT, CT) km of forecast minus observed position on the tangent plane at the observation.

    AT is positive ahead of the observed motion; CT is positive to the right
    of the motion in the northern hemisphere and to the left in the southern.
    """
    mx, my = local_offset_km(motion_from, motion_to)
    norm = math.hypot(mx, my)
    if norm == 0.0:
        raise UndefinedDecompositionError("best track does not move; along/cross-track undefined")
    mx, my = mx / norm, my / norm
    dx, dy = local_offset_km(observed, forecast)
    at = dx * mx + dy * my
    ct = dx * my - dy * mx
    if observed[0] < 0:
        ct = -ct
    return at, ct


def _interp_position(best: Track, time):
    pts = best.points
    for a, b in zip(pts, pts[1:]):
        if a.time <= time <= b.time:
            if b.time == a.time:
                return (a.lat, a.lon)
            w = (time - a.time) / (b.time - a.time)
            dlon = (b.lon - a.lon + 180.0) % 360.0 - 180.0
            return (a.lat + w * (b.lat - a.lat), (a.lon + w * dlon) % 360.0)
    p = best.at(time)
    return None if p is None else (p.lat, p.lon)


def at_ct(forecast_pos, best_track: Track, valid_time) -> tuple[float, float]:
    """Along/cross-track error against the best track, whose motion brackets ``valid_time``."""
    obs = _interp_position(best_track, valid_time)
    if obs is None:
        raise TrackingError(f"best track has no position at {valid_time} h")
    before = [p for p in best_track.points if p.time < valid_time - 1e-9]
    after = [p for p in best_track.points if p.time > valid_time + 1e-9]
    start = (before[-1].lat, before[-1].lon) if before else obs
    end = (after[0].lat, after[0].lon) if after else obs
    return along_cross_track(forecast_pos, obs, start, end)


def _mean_position(points):
    # offsets from the first member keep identical members exact and handle the dateline
    lat0, lon0 = points[0]
    dlat = np.array([p[0] - lat0 for p in points])
    dl = np.array([(p[1] - lon0 + 180.0) % 360.0 - 180.0 for p in points])
    return float(lat0 + dlat.mean()), float((lon0 + dl.mean()) % 360.0)


@dataclass
class EnsembleTrackStats:
    leads: list = field(default_factory=list)
    error: dict = field(default_factory=dict)  # lead -> km
    spread: dict = field(default_factory=dict)
    along: dict = field(default_factory=dict)
    cross: dict = field(default_factory=dict)
    members: dict = field(default_factory=dict)  # lead -> members still tracking
    excluded_leads: list = field(default_factory=list)
    shrunk_leads: list = field(default_factory=list)
    acc_error: float = 0.0
    acc_spread: float = 0.0
    excluded: bool = False

    def to_dict(self):
        return asdict(self)


def ensemble_track_stats(member_tracks, best_track: Track, min_fraction=2.0 / 3.0,
                         step_hours=6.0, max_hours=120.0) -> EnsembleTrackStats:
    """Ensemble-mean position error, member spread and their sums over 6..max_hours.

    Leads where fewer than ``min_fraction`` of members hold the storm are
    excluded and listed; a case with no usable lead is flagged ``excluded``.
    """
    n = len(member_tracks)
    if n < 2:
        raise TrackingError("ensemble track statistics need at least 2 member tracks")
    st = EnsembleTrackStats()
    t = step_hours
    while t <= max_hours + 1e-9:
        obs = best_track.at(t)
        pts = [tr.at(t) for tr in member_tracks]
        pts = [(p.lat, p.lon) for p in pts if p is not None]
        if obs is None:
            t += step_hours
            continue
        if len(pts) < 2 or len(pts) / n < min_fraction - 1e-12:
            st.excluded_leads.append(t)
            t += step_hours
            continue
        o = (obs.lat, obs.lon)
        mean = _mean_position(pts)
        st.leads.append(t)
        st.members[t] = len(pts)
        if len(pts) < n:
            st.shrunk_leads.append(t)
        st.error[t] = great_circle_km(mean, o)
        d = np.array([great_circle_km(mean, p) for p in pts])
        st.spread[t] = float(np.sqrt(np.mean(d ** 2)))
        try:
            st.along[t], st.cross[t] = at_ct(mean, best_track, t)
        except UndefinedDecompositionError:
            st.along[t] = st.cross[t] = math.nan
        t += step_hours
    st.acc_error = float(sum(st.error[t] for t in st.leads))
    st.acc_spread = float(sum(st.spread[t] for t in st.leads))
    st.excluded = not st.leads
    return st


def aggregate_track_stats(cases) -> dict:
    """Root-mean-square error and spread per lead over the non-excluded cases."""
    kept = [c for c in cases if not c.excluded]
    leads = sorted({t for c in kept for t in c.leads})
    err, spr = {}, {}
    for t in leads:
        e = [c.error[t] for c in kept if t in c.error]
        s = [c.spread[t] for c in kept if t in c.spread]
        err[t] = float(np.sqrt(np.mean(np.square(e))))
        spr[t] = float(np.sqrt(np.mean(np.square(s))))
    return {"leads": leads, "error": err, "spread": spr,
            "acc_error": float(sum(err.values())), "acc_spread": float(sum(spr.values())),
            "cases": len(kept), "excluded_cases": len(cases) - len(kept)}


# ---------------------------------------------------------------- I/O

_ID_KEYS = ("sid", "storm_id", "stormid", "id")
_TIME_KEYS = ("iso_time", "time", "isotime", "datetime")
_LAT_KEYS = ("lat", "latitude", "usa_lat")
_LON_KEYS = ("lon", "longitude", "usa_lon")


def _pick(header, keys):
    low = [h.strip().lower() for h in header]
    for k in keys:
        if k in low:
            return low.index(k)
    raise TrackingError(f"best-track CSV lacks a column named one of {keys}")


def read_best_tracks(path) -> dict[str, list[tuple[datetime, float, float]]]:
    """IBTrACS-style CSV: storm id, ISO time, lat, lon.

    Header names are matched case-insensitively; unit rows, blank or
    non-numeric positions are skipped; longitudes are wrapped into [0, 360).
    """
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None:
            raise TrackingError(f"{path}: empty best-track file")
        ci, ct, cla, clo = (_pick(header, k) for k in (_ID_KEYS, _TIME_KEYS, _LAT_KEYS, _LON_KEYS))
        for row in rows:
            if len(row) <= max(ci, ct, cla, clo):
                continue
            try:
                when = datetime.fromisoformat(row[ct].strip().replace("Z", ""))
                lat, lon = float(row[cla]), float(row[clo])
            except ValueError:
                continue
            if not (math.isfinite(lat) and math.isfinite(lon)):
                continue
            out.setdefault(row[ci].strip(), []).append((when, lat, lon % 360.0))
    for v in out.values():
        v.sort()
    return out


def best_track_from_records(records, init_time: datetime) -> Track:
    pts = [TrackPoint((w - init_time).total_seconds() / 3600.0, la, lo) for w, la, lo in records]
    return Track([p for p in pts if p.time >= -1e-9])


def write_best_track_csv(path, storm_id, init_time: datetime, track: Track):
    from datetime import timedelta

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["SID", "ISO_TIME", "LAT", "LON"])
        for p in track.points:
            when = init_time + timedelta(hours=p.time)
            w.writerow([storm_id, when.isoformat(sep=" "), f"{p.lat:.4f}", f"{p.lon:.4f}"])


def write_tracks_csv(path, tracks, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["member", "time_h", "lat", "lon", "msl_min", "terminated_reason"])
        for tr in tracks:
            for p in tr.points:
                w.writerow([tr.member, f"{p.time:g}", f"{p.lat:.4f}", f"{p.lon:.4f}",
                            f"{p.msl_min:.3f}", tr.terminated_reason])


def write_tracks_json(path, tracks, meta=None):
    doc = {"meta": meta or {},
           "tracks": [{"member": tr.member, "terminated_reason": tr.terminated_reason,
                       "points": [asdict(p) for p in tr.points]} for tr in tracks]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
