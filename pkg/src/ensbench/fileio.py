"""Binary formats shared across the package.

Field records (``.ensf``)::

    magic  b"ENSF"        4 bytes
    version               u16  (currently 1)
    dtype tag             u16  (1 = float32 little-endian)
    nlat, nlon            u32, u32
    lat_start, lat_step   f64, f64
    lon_start, lon_step   f64, f64
    values                nlat*nlon float32, row-major

A file may hold several records back to back (a stack of frames).

Containers (checkpoints ``ENSC``, ensemble forecasts ``ENSE``)::

    magic                 4 bytes
    version               u16
    header length         u32
    header                UTF-8 JSON, keys sorted; "arrays" lists name/shape/offset
    blobs                 float32 little-endian, concatenated in header order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grid import Field, GridSpec

FIELD_MAGIC = b"ENSF"
FIELD_VERSION = 1
DTYPE_F32LE = 1
_FIELD_HEADER = struct.Struct("<4sHHII4d")
_CONTAINER_HEADER = struct.Struct("<4sHI")
CONTAINER_VERSION = 1


class FormatError(ValueError):
    pass


def pack_field(grid: GridSpec, values) -> bytes:
    values = np.asarray(values)
    if values.shape != grid.shape:
        raise FormatError(f"values shape {values.shape} does not match grid {grid.shape}")
    head = _FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, DTYPE_F32LE, grid.nlat, grid.nlon,
                              grid.lat_start, grid.lat_step, grid.lon_start, grid.lon_step)
    return head + np.ascontiguousarray(values, dtype="<f4").tobytes()


def write_fields(path, grid: GridSpec, stack) -> None:
    """Write one record per leading index of ``stack`` (shape (..., nlat, nlon))."""
    stack = np.asarray(stack)
    flat = stack.reshape((-1,) + grid.shape)
    with open(path, "wb") as fh:
        for frame in flat:
            fh.write(pack_field(grid, frame))


def write_field(path, fld: Field) -> None:
    write_fields(path, fld.grid, fld.values[None])


def read_fields(path) -> tuple[GridSpec, np.ndarray]:
    """Read every record; all must share one grid. Returns (grid, array (n, nlat, nlon))."""
    data = Path(path).read_bytes()
    pos, grid, frames = 0, None, []
    while pos < len(data):
        if len(data) - pos < _FIELD_HEADER.size:
            raise FormatError(f"{path}: truncated field header at byte {pos}")
        magic, ver, tag, nlat, nlon, la0, dla, lo0, dlo = _FIELD_HEADER.unpack_from(data, pos)
        if magic != FIELD_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r} at byte {pos}")
        if ver != FIELD_VERSION:
            raise FormatError(f"{path}: unsupported field version {ver}")
        if tag != DTYPE_F32LE:
            raise FormatError(f"{path}: unsupported dtype tag {tag}")
        g = GridSpec(nlat, nlon, la0, dla, lo0, dlo)
        if grid is None:
            grid = g
        elif g != grid:
            raise FormatError(f"{path}: mixed grids {grid.describe()} and {g.describe()}")
        pos += _FIELD_HEADER.size
        nbytes = 4 * nlat * nlon
        if len(data) - pos < nbytes:
            raise FormatError(f"{path}: truncated values")
        frames.append(np.frombuffer(data, dtype="<f4", count=nlat * nlon, offset=pos)
                      .reshape(nlat, nlon))
        pos += nbytes
    if grid is None:
        raise FormatError(f"{path}: no field records")
    return grid, np.stack(frames).astype(np.float64)


def read_field(path) -> Field:
    grid, frames = read_fields(path)
    return Field(grid, frames[0])


def write_container(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    head = dict(header)
    head["arrays"] = entries
    text = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CONTAINER_HEADER.pack(magic, CONTAINER_VERSION, len(text)))
        fh.write(text)
        for blob in blobs:
            fh.write(blob)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _CONTAINER_HEADER.size:
        raise FormatError(f"{path}: file too short")
    got, ver, hlen = _CONTAINER_HEADER.unpack_from(data, 0)
    if got != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {got!r}")
    if ver != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {ver}")
    start = _CONTAINER_HEADER.size
    header = json.loads(data[start:start + hlen].decode())
    base = start + hlen
    arrays = {}
    for e in header.pop("arrays"):
        count = e["nbytes"] // 4
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=base + e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return header, arrays
