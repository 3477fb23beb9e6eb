"""Lat-lon grid geometry: latitude weights, block pooling and great-circle distances."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_KM = 6371.0


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Regular lat-lon grid. Row i sits at ``lat_start + i * lat_step``."""

    nlat: int
    nlon: int
    lat_start: float
    lat_step: float
    lon_start: float = 0.0
    lon_step: float = 1.0

    def __post_init__(self):
        if self.nlat < 1 or self.nlon < 1:
            raise GridError(f"grid needs nlat, nlon >= 1, got {self.nlat}x{self.nlon}")
        last = self.lat_start + (self.nlat - 1) * self.lat_step
        for lat in (self.lat_start, last):
            if lat < -90.0 - 1e-9 or lat > 90.0 + 1e-9:
                raise GridError(f"latitude {lat} outside [-90, 90]")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nlat, self.nlon)

    @property
    def lats(self) -> np.ndarray:
        return self.lat_start + self.lat_step * np.arange(self.nlat)

    @property
    def lons(self) -> np.ndarray:
        return np.mod(self.lon_start + self.lon_step * np.arange(self.nlon), 360.0)

    @property
    def periodic(self) -> bool:
        """True when the longitudes close the full circle."""
        return math.isclose(abs(self.nlon * self.lon_step), 360.0, abs_tol=1e-9)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        lon2, lat2 = np.meshgrid(self.lons, self.lats)
        return lat2, lon2

    def index_of(self, lat: float, lon: float) -> tuple[int, int]:
        """Nearest grid index; longitude is compared modulo 360."""
        i = int(round((lat - self.lat_start) / self.lat_step))
        dlon = (lon - self.lon_start) % 360.0
        j = int(round(dlon / self.lon_step))
        if self.periodic:
            j %= self.nlon
        return min(max(i, 0), self.nlat - 1), min(max(j, 0), self.nlon - 1)

    def contains(self, lat: float, lon: float) -> bool:
        lo, hi = sorted((self.lat_start, self.lat_start + (self.nlat - 1) * self.lat_step))
        if not lo - 1e-9 <= lat <= hi + 1e-9:
            return False
        if self.periodic:
            return True
        return (lon - self.lon_start) % 360.0 <= (self.nlon - 1) * self.lon_step + 1e-9

    def describe(self) -> str:
        return (f"{self.nlat}x{self.nlon} (lat {self.lat_start:g}+{self.lat_step:g}, "
                f"lon {self.lon_start:g}+{self.lon_step:g})")

    def to_dict(self) -> dict:
        return {"nlat": self.nlat, "nlon": self.nlon, "lat_start": self.lat_start,
                "lat_step": self.lat_step, "lon_start": self.lon_start, "lon_step": self.lon_step}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["nlat"]), int(d["nlon"]), float(d["lat_start"]), float(d["lat_step"]),
                   float(d.get("lon_start", 0.0)), float(d.get("lon_step", 1.0)))


@dataclass
class Field:
    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise GridError(f"values shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise GridError("field contains non-finite values")


def latitude_weights(grid: GridSpec) -> np.ndarray:
    """cos(latitude) weights normalised to unit mean over rows."""
    w = np.cos(np.deg2rad(grid.lats))
    w = np.where(np.abs(w) < 1e-12, 0.0, w)
    if not np.any(w > 0):
        raise GridError("degenerate latitude weights: every row lies on a pole")
    return w / w.mean()


def average_pool(fld: Field, factor: int, edge: str = "reject") -> Field:
    """Mean over factor x factor blocks, placed at block centres.

    ``edge="truncate"`` drops trailing rows/columns that do not fill a block.
    """
    if factor <= 0:
        raise GridError(f"pool factor must be positive, got {factor}")
    g = fld.grid
    if g.nlat % factor or g.nlon % factor:
        if edge != "truncate":
            raise GridError(f"grid {g.nlat}x{g.nlon} not divisible by pool factor {factor}")
    ny, nx = g.nlat // factor, g.nlon // factor
    if ny == 0 or nx == 0:
        raise GridError(f"pool factor {factor} larger than grid {g.nlat}x{g.nlon}")
    v = fld.values[: ny * factor, : nx * factor]
    pooled = v.reshape(ny, factor, nx, factor).mean(axis=(1, 3))
    offset = 0.5 * (factor - 1)
    coarse = GridSpec(ny, nx, g.lat_start + offset * g.lat_step, g.lat_step * factor,
                      (g.lon_start + offset * g.lon_step) % 360.0, g.lon_step * factor)
    return Field(coarse, pooled)


def great_circle_km(a, b):
    """Haversine distance in km between (lat, lon) points given in degrees.

    Works elementwise on arrays: ``a`` and ``b`` are pairs of broadcastable arrays.
    """
    lat1, lon1 = np.deg2rad(a[0]), np.deg2rad(a[1])
    lat2, lon2 = np.deg2rad(b[0]), np.deg2rad(b[1])
    h = (np.sin((lat2 - lat1) / 2.0) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return float(d) if np.ndim(d) == 0 else d


def initial_bearing(a, b) -> float:
    """Bearing in degrees clockwise from north for the great circle a -> b."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    dlon = lon2 - lon1
    y = math.sin(dlon) * math.cos(lat2)
    x = math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(lat2) * math.cos(dlon)
    return math.degrees(math.atan2(y, x)) % 360.0


def destination(start, bearing_deg: float, distance_km: float) -> tuple[float, float]:
    """Point reached from ``start`` after travelling along a great circle."""
    lat1, lon1 = math.radians(start[0]), math.radians(start[1])
    brg = math.radians(bearing_deg)
    delta = distance_km / EARTH_RADIUS_KM
    lat2 = math.asin(math.sin(lat1) * math.cos(delta)
                     + math.cos(lat1) * math.sin(delta) * math.cos(brg))
    lon2 = lon1 + math.atan2(math.sin(brg) * math.sin(delta) * math.cos(lat1),
                             math.cos(delta) - math.sin(lat1) * math.sin(lat2))
    return math.degrees(lat2), math.degrees(lon2) % 360.0


def local_offset_km(origin, point) -> tuple[float, float]:
    """(east, north) offset of ``point`` from ``origin`` on the equirectangular tangent plane."""
    dlon = (point[1] - origin[1] + 180.0) % 360.0 - 180.0
    km_per_deg = math.pi * EARTH_RADIUS_KM / 180.0
    east = dlon * km_per_deg * math.cos(math.radians(origin[0]))
    north = (point[0] - origin[0]) * km_per_deg
    return east, north


def offset_point(origin, east_km: float, north_km: float) -> tuple[float, float]:
    """Move from ``origin`` by a tangent-plane displacement, following the great circle."""
    dist = math.hypot(east_km, north_km)
    if dist == 0.0:
        return float(origin[0]), float(origin[1]) % 360.0
    return destination(origin, math.degrees(math.atan2(east_km, north_km)), dist)


def to_csv(fld: Field, path) -> None:
    lat2, lon2 = fld.grid.mesh()
    with open(path, "w") as fh:
        fh.write("lat,lon,value\n")
        for la, lo, v in zip(lat2.ravel(), lon2.ravel(), fld.values.ravel()):
            fh.write(f"{la:.6f},{lo:.6f},{v:.9g}\n")
