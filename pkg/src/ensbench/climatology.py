"""Climatological means and percentile thresholds, stratified by (month, hour of day)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import read_fields, write_fields
from .grid import GridSpec

DEFAULT_LEVELS = (2, 5, 10, 90, 95, 98)


class MissingClimatologyError(KeyError):
    pass


@dataclass
class Climatology:
    """Per-stratum mean (C, H, W) and percentile tables (L, C, H, W)."""

    levels: tuple
    mean: dict = field(default_factory=dict)
    percentiles: dict = field(default_factory=dict)

    def _get(self, table, stratum):
        key = tuple(stratum)
        if key not in table:
            raise MissingClimatologyError(f"no climatology for stratum month={key[0]} hour={key[1]}")
        return table[key]

    def mean_for(self, stratum) -> np.ndarray:
        return self._get(self.mean, stratum)

    def threshold(self, stratum, level) -> np.ndarray:
        table = self._get(self.percentiles, stratum)
        return table[list(self.levels).index(level)]

    def save(self, path, grid: GridSpec) -> None:
        """Write all tables as one Field stream plus a JSON index next to it."""
        path = Path(path)
        keys = sorted(self.mean)
        stack, index = [], []
        for k in keys:
            for c, plane in enumerate(self.mean[k]):
                index.append({"stratum": list(k), "stat": "mean", "channel": c})
                stack.append(plane)
            for li, lev in enumerate(self.levels):
                for c, plane in enumerate(self.percentiles[k][li]):
                    index.append({"stratum": list(k), "stat": f"p{lev}", "channel": c})
                    stack.append(plane)
        write_fields(path, grid, np.array(stack))
        meta = {"levels": list(self.levels), "records": index, "grid": grid.to_dict()}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Climatology":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        _, frames = read_fields(path)
        levels = tuple(meta["levels"])
        nchan = 1 + max(r["channel"] for r in meta["records"])
        clim = cls(levels)
        for rec, plane in zip(meta["records"], frames):
            k = tuple(rec["stratum"])
            if k not in clim.mean:
                clim.mean[k] = np.zeros((nchan,) + plane.shape)
                clim.percentiles[k] = np.zeros((len(levels), nchan) + plane.shape)
            if rec["stat"] == "mean":
                clim.mean[k][rec["channel"]] = plane
            else:
                li = levels.index(int(rec["stat"][1:]))
                clim.percentiles[k][li, rec["channel"]] = plane
        return clim


def climatology_percentiles(history, strata, levels=DEFAULT_LEVELS) -> Climatology:
    """Build per-stratum climatology from a history of states.

    history: array (T, C, H, W); strata: length-T sequence of (month, hour) keys.
    Percentiles interpolate linearly between order statistics.
    """
    hist = np.asarray(history, dtype=np.float64)
    keys = [tuple(int(v) for v in s) for s in strata]
    if len(keys) != hist.shape[0]:
        raise ValueError(f"{len(keys)} strata labels for {hist.shape[0]} history samples")
    levels = tuple(sorted(levels))
    clim = Climatology(levels)
    groups: dict[tuple, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    for k in sorted(groups):
        idx = groups[k]
        if len(idx) < 2:
            raise MissingClimatologyError(
                f"stratum month={k[0]} hour={k[1]} has {len(idx)} sample(s); need >= 2")
        sample = hist[idx]
        clim.mean[k] = sample.mean(axis=0)
        clim.percentiles[k] = np.percentile(sample, levels, axis=0, method="linear")
    return clim
